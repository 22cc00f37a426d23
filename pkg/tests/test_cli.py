import csv
import json

import numpy as np
import pytest

from pmpm import cli
from pmpm.cli import ConfigError, RunConfig, main, read_config_file, validate

SMALL = ["--n_spins", "4", "--chi", "1", "--n_intervals", "4", "--max_iters", "20"]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_file_parsing(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# instance\nn_spins = 12\nchi=0.5  # twist\n\nu_max = inf\n"
                        "continuation = 8, 16\ninit_values = 2.5,5\n")
        values = read_config_file(path)
        assert values == {"n_spins": 12, "chi": 0.5, "u_max": None,
                          "continuation": (8, 16), "init_values": (2.5, 5.0)}

    @pytest.mark.parametrize("text", ["bogus = 1\n", "n_spins 4\n", "chi = abc\n"])
    def test_file_errors(self, tmp_path, text):
        path = tmp_path / "bad.cfg"
        path.write_text(text)
        with pytest.raises(ConfigError):
            read_config_file(path)

    @pytest.mark.parametrize("changes,key", [
        (dict(n_spins=0), "n_spins"),
        (dict(chi=float("inf")), "chi"),
        (dict(cost="entropy"), "cost"),
        (dict(cost="fidelity"), "target"),
        (dict(u_max=-1.0), "u_max"),
        (dict(n_substeps=12), "n_substeps"),
        (dict(init_values=(1.0, float("nan"))), "init_values"),
    ])
    def test_validation_names_key(self, changes, key):
        with pytest.raises(ConfigError, match=key):
            validate(RunConfig(**changes))

    def test_flags_override_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("n_spins = 12\nchi = 0.5\n")
        args = cli.build_parser().parse_args(["run", "--config", str(path), "--n-spins", "6"])
        cfg = cli.resolve_config(args)
        assert (cfg.n_spins, cfg.chi) == (6, 0.5)

    def test_output_dir_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
        assert cli.output_dir(RunConfig()) == tmp_path / "env"
        monkeypatch.delenv(cli.OUTPUT_ENV)
        with pytest.raises(ConfigError, match="output_dir"):
            cli.output_dir(RunConfig())


class TestRun:
    def test_qfi_artifacts(self, tmp_path, capsys):
        out = tmp_path / "qfi"
        assert main(["run", *SMALL, "--output_dir", str(out)]) == cli.EXIT_OK
        assert "objective" in capsys.readouterr().out
        control = read_rows(out / "control.csv")
        assert control[0] == ["interval_start", "interval_end", "omega_value"]
        assert len(control) == 5
        assert float(control[-1][1]) == pytest.approx(1.0)
        diag = read_rows(out / "diagnostics.csv")
        assert diag[0] == ["t", "phi", "hc"] and len(diag) == 4 * 8 + 2
        summary = json.loads((out / "summary.json").read_text())
        for key in ("objective", "phi_mean", "phi_sd", "iterations", "status", "wall_time",
                    "config"):
            assert key in summary
        assert summary["config"]["n_spins"] == 4
        assert not (out / "probabilities.csv").exists()

    def test_cfi_writes_probabilities(self, tmp_path):
        out = tmp_path / "cfi"
        assert main(["run", *SMALL, "--cost", "cfi", "--output_dir", str(out)]) == 0
        rows = read_rows(out / "probabilities.csv")
        assert rows[0] == ["m", "P_m", "dP_m"]
        p = np.array([float(r[1]) for r in rows[1:]])
        assert p.size == 5 and p.sum() == pytest.approx(1.0, abs=1e-9)
        summary = json.loads((out / "summary.json").read_text())
        assert summary["phase"] is not None

    def test_fidelity_with_target_file(self, tmp_path):
        target = tmp_path / "target.txt"
        np.savetxt(target, [1.0, 0, 0, 0, 1.0])
        out = tmp_path / "fid"
        code = main(["run", *SMALL, "--cost", "fidelity", "--target", str(target),
                     "--t_final", "0.5", "--output_dir", str(out)])
        assert code == 0
        assert 0 < json.loads((out / "summary.json").read_text())["objective"] <= 1

    def test_bad_target_file(self, tmp_path, capsys):
        target = tmp_path / "target.txt"
        np.savetxt(target, [1.0, 0.0])
        code = main(["run", *SMALL, "--cost", "fidelity", "--target", str(target),
                     "--output_dir", str(tmp_path)])
        assert code == cli.EXIT_CONFIG
        assert "target" in capsys.readouterr().err

    def test_reproducible_bytes(self, tmp_path):
        args = ["run", *SMALL, "--restarts", "1", "--seed", "5", "--cost", "cfi",
                "--output_dir", str(tmp_path)]
        names = ("control.csv", "diagnostics.csv", "probabilities.csv", "summary.json")
        runs = []
        for _ in range(2):
            assert main(args) == 0
            runs.append({n: (tmp_path / n).read_bytes() for n in names})
        for name in names[:-1]:
            assert runs[0][name] == runs[1][name]
        a, b = (json.loads(r["summary.json"]) for r in runs)
        a.pop("wall_time"), b.pop("wall_time")
        assert a == b

    def test_continuation_levels_reported(self, tmp_path):
        out = tmp_path / "cont"
        assert main(["run", *SMALL, "--continuation", "2", "--output_dir", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert [lv["n_intervals"] for lv in summary["continuation_levels"]] == [2, 4]

    def test_config_error_exit(self, tmp_path, capsys):
        assert main(["run", "--n_spins", "-2", "--output_dir", str(tmp_path)]) == 1
        assert "n_spins" in capsys.readouterr().err

    def test_missing_output_dir(self, monkeypatch, capsys):
        monkeypatch.delenv(cli.OUTPUT_ENV, raising=False)
        assert main(["run", *SMALL]) == cli.EXIT_CONFIG
        assert "output_dir" in capsys.readouterr().err

    def test_stalled_exit(self, tmp_path, monkeypatch):
        monkeypatch.setattr(cli, "optimize", _stalled(cli.optimize))
        assert main(["run", *SMALL, "--output_dir", str(tmp_path)]) == cli.EXIT_STALLED


def _stalled(optimize):
    def wrapped(*args, **kwargs):
        result = optimize(*args, **kwargs)
        result.status = cli.STATUS_STALLED
        return result
    return wrapped


class TestSweep:
    def test_u_max_sweep(self, tmp_path):
        code = main(["sweep", *SMALL, "--axis", "u_max", "--values", "0.5,inf",
                     "--output_dir", str(tmp_path)])
        assert code == 0
        rows = read_rows(tmp_path / "sweep.csv")
        assert rows[0] == ["value", "objective", "phi_sd", "hc_mean"]
        assert [r[0] for r in rows[1:]] == ["0.5", "inf"]
        assert (tmp_path / "u_max=0.5" / "control.csv").exists()
        assert (tmp_path / "u_max=none" / "summary.json").exists()
        bounded = read_rows(tmp_path / "u_max=0.5" / "control.csv")[1:]
        assert all(abs(float(r[2])) <= 0.5 for r in bounded)

    def test_warm_started_n_intervals(self, tmp_path):
        code = main(["sweep", *SMALL, "--axis", "n_intervals", "--values", "2,4",
                     "--warm_start", "true", "--output_dir", str(tmp_path)])
        assert code == 0
        assert len(read_rows(tmp_path / "n_intervals=4" / "control.csv")) == 5

    def test_bad_values(self, tmp_path):
        code = main(["sweep", *SMALL, "--axis", "n_intervals", "--values", "2.5",
                     "--output_dir", str(tmp_path)])
        assert code == cli.EXIT_CONFIG


class TestVerify:
    def test_passes_by_default(self, tmp_path, capsys):
        assert main(["verify", "--output_dir", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "verify.json").read_text())
        assert report["passed"]
        assert set(report["checks"]) == {"psi1_finite_difference", "pairing_invariant",
                                         "norm_conservation", "gradient", "orthogonality"}
        assert report["checks"]["gradient"]["constant"] == pytest.approx(2.0, rel=1e-4)
        assert "FAIL" not in capsys.readouterr().out

    def test_corrupted_costate_fails(self, tmp_path, capsys):
        code = main(["verify", "--costate_sign", "-1", "--output_dir", str(tmp_path)])
        assert code == cli.EXIT_VERIFY_FAILED
        assert "gradient: FAIL" in capsys.readouterr().out

    def test_large_delta_is_flagged(self, tmp_path, capsys):
        main(["verify", "--delta", "1e-2", "--output_dir", str(tmp_path)])
        assert "truncation dominated" in capsys.readouterr().out

    @pytest.mark.parametrize("cost", ["cfi", "fidelity"])
    def test_other_costs(self, tmp_path, cost):
        extra = ["--target", "hl"] if cost == "fidelity" else ["--phase_init", "0.7"]
        assert main(["verify", "--cost", cost, *extra, "--output_dir", str(tmp_path)]) == 0


class TestRescale:
    def test_round_trip(self, tmp_path):
        src = tmp_path / "control.csv"
        cli._write_csv(src, ("interval_start", "interval_end", "omega_value"),
                       [(0, 0.5, 40.0), (0.5, 1.0, -20.0)])
        fwd, back = tmp_path / "fwd.csv", tmp_path / "back.csv"
        assert main(["rescale", str(src), "--n_spins", "20", "--chi", "2",
                     "--output", str(fwd)]) == 0
        rows = read_rows(fwd)[1:]
        np.testing.assert_allclose([[float(x) for x in r] for r in rows],
                                   [[0, 20, 1.0], [20, 40, -0.5]])
        assert main(["rescale", str(fwd), "--n-spins", "20", "--chi", "2", "--inverse",
                     "--output", str(back)]) == 0
        assert back.read_bytes() == src.read_bytes()

    def test_stdout(self, tmp_path, capsys):
        src = tmp_path / "control.csv"
        cli._write_csv(src, ("interval_start", "interval_end", "omega_value"), [(0, 1, 4.0)])
        assert main(["rescale", str(src), "--n_spins", "4", "--chi", "1"]) == 0
        assert capsys.readouterr().out.splitlines()[1] == "0,4,1"

    def test_zero_twist(self, tmp_path):
        src = tmp_path / "control.csv"
        cli._write_csv(src, ("interval_start", "interval_end", "omega_value"), [(0, 1, 4.0)])
        assert main(["rescale", str(src), "--n_spins", "4", "--chi", "0"]) == cli.EXIT_CONFIG

    def test_missing_column(self, tmp_path):
        src = tmp_path / "control.csv"
        src.write_text("a,b\n1,2\n")
        assert main(["rescale", str(src), "--n_spins", "4", "--chi", "1"]) == cli.EXIT_CONFIG
