"""Command-line experiment runner.

Subcommands ``run``, ``sweep``, ``verify`` and ``rescale``.  Settings come
from a flat ``key = value`` file (``--config``) overridden by flags whose
names mirror the keys.  Exit codes: 0 ok, 1 configuration error, 2 the
optimizer stalled, 3 a verification check failed.
"""
import argparse
import csv
import dataclasses
from dataclasses import dataclass
import json
import logging
import math
import os
from pathlib import Path
import sys

import numpy as np

from .costs import CFI, QFI, Fidelity, measurement_distribution
from .dynamics import (
    ControlProtocol,
    CostatePair,
    ProblemSpec,
    default_substeps,
    evolve_forward,
)
from .optimizer import (
    STATUS_STALLED,
    OptimizerOptions,
    dimensionless_rescale,
    optimize,
    optimize_continuation,
    resample_control,
    undo_rescale,
)
from . import oracle
from .spin import hl_state, jx_eigensystem

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_STALLED = 2
EXIT_VERIFY_FAILED = 3

COSTS = ("qfi", "cfi", "fidelity")
SWEEP_AXES = ("t_final", "u_max", "n_intervals")
OUTPUT_ENV = "PMPM_OUTPUT_DIR"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class RunConfig:
    n_spins: int = 10
    chi: float = 4.0
    omega: float = 0.0
    t_final: float = 1.0
    n_intervals: int = 64
    cost: str = "qfi"
    u_max: float | None = None
    target: str | None = None
    phase_init: float | None = None
    cfi_eps: float = 1e-10
    seed: int = 0
    restarts: int = 0
    init_value: float = 1.0
    init_values: tuple[float, ...] = ()
    continuation: tuple[int, ...] = ()
    warm_start: bool = False
    armijo_c1: float = 1e-4
    shrink: float = 0.5
    initial_step: float | None = None
    n_substeps: int | None = None
    samples_per_interval: int = 8
    tol_phi_sd: float | None = None
    max_iters: int = 2000
    output_dir: str | None = None
    # verify only
    delta: float = 1e-6
    omega_delta: float = 1e-4
    costate_sign: float = 1.0

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["continuation"] = list(self.continuation)
        out["init_values"] = list(self.init_values)
        return out


# verify defaults to a small instance so the finite-difference sweeps stay cheap
VERIFY_DEFAULTS = {"n_spins": 6, "chi": 2.0, "n_intervals": 4}

_OPTIONAL = {"u_max", "target", "phase_init", "initial_step", "n_substeps", "tol_phi_sd",
             "output_dir"}


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_list(text, kind):
    return tuple(kind(x) for x in text.split(",") if x.strip())


def _parse_value(key, text):
    """Convert the textual value of ``key`` to its RunConfig type."""
    text = str(text).strip()
    if key in _OPTIONAL and text.lower() in ("", "none"):
        return None
    if key == "u_max" and text.lower() in ("inf", "infinity"):
        return None
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            return _parse_bool(text)
        if kind == "ints":
            return _parse_list(text, int)
        if kind == "floats":
            return _parse_list(text, float)
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from None


def _field_kind(f):
    t = f.type.__name__ if f.type in (int, float, bool, str) else str(f.type)
    if t.startswith("tuple"):
        return "floats" if "float" in t else "ints"
    for kind in ("int", "float", "bool", "str"):
        if t.startswith(kind):
            return kind
    raise TypeError(t)


_FIELD_TYPES = {f.name: _field_kind(f) for f in dataclasses.fields(RunConfig)}


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{key}: unknown configuration key ({path}:{lineno})")
            values[key] = _parse_value(key, value)
    return values


def validate(cfg):
    """Raise ConfigError naming the first invalid key."""
    def need(ok, key, why):
        if not ok:
            raise ConfigError(f"{key}: {why} (got {getattr(cfg, key)!r})")

    for name, kind in _FIELD_TYPES.items():
        value = getattr(cfg, name)
        if kind == "float" and value is not None:
            need(math.isfinite(value), name, "must be finite")
    need(cfg.n_spins >= 1, "n_spins", "must be a positive integer")
    need(cfg.t_final > 0, "t_final", "must be positive")
    need(cfg.n_intervals >= 1, "n_intervals", "must be >= 1")
    need(cfg.cost in COSTS, "cost", f"must be one of {', '.join(COSTS)}")
    need(cfg.u_max is None or cfg.u_max > 0, "u_max", "must be positive")
    need(cfg.cost != "fidelity" or cfg.target is not None, "target",
         "cost=fidelity requires a target (hl or a file path)")
    need(cfg.cfi_eps > 0, "cfi_eps", "must be positive")
    need(cfg.restarts >= 0, "restarts", "must be >= 0")
    need(all(math.isfinite(v) for v in cfg.init_values), "init_values", "must be finite")
    need(all(n >= 1 for n in cfg.continuation), "continuation", "levels must be >= 1")
    need(0 < cfg.armijo_c1 < 1, "armijo_c1", "must lie in (0, 1)")
    need(0 < cfg.shrink < 1, "shrink", "must lie in (0, 1)")
    need(cfg.initial_step is None or cfg.initial_step > 0, "initial_step", "must be positive")
    need(cfg.samples_per_interval >= 1, "samples_per_interval", "must be >= 1")
    need(cfg.n_substeps is None or (cfg.n_substeps >= 1
                                    and cfg.n_substeps % cfg.samples_per_interval == 0),
         "n_substeps", "must be a positive multiple of samples_per_interval")
    need(cfg.tol_phi_sd is None or cfg.tol_phi_sd > 0, "tol_phi_sd", "must be positive")
    need(cfg.max_iters >= 1, "max_iters", "must be >= 1")
    need(cfg.delta > 0, "delta", "must be positive")
    need(cfg.omega_delta > 0, "omega_delta", "must be positive")
    need(cfg.costate_sign in (1.0, -1.0), "costate_sign", "must be +1 or -1")
    return cfg


# -- building library objects from a config ----------------------------------------

def problem_spec(cfg):
    return ProblemSpec(cfg.n_spins, cfg.chi, cfg.omega, cfg.t_final, cfg.u_max)


def load_target(cfg):
    if cfg.target is None:
        return None
    if cfg.target.lower() == "hl":
        return hl_state(cfg.n_spins)
    try:
        data = np.loadtxt(cfg.target, ndmin=2)
    except OSError as exc:
        raise ConfigError(f"target: cannot read {cfg.target!r} ({exc})") from None
    # one column of real amplitudes, or two columns (real, imaginary)
    amps = data[:, 0] + (1j * data[:, 1] if data.shape[1] > 1 else 0.0)
    if amps.shape != (cfg.n_spins + 1,):
        raise ConfigError(f"target: expected {cfg.n_spins + 1} amplitudes, got {amps.size}")
    norm = np.linalg.norm(amps)
    if not norm > 0:
        raise ConfigError("target: zero vector")
    return amps / norm


def cost_kind(cfg):
    if cfg.cost == "qfi":
        return QFI()
    if cfg.cost == "cfi":
        return CFI(0.0, cfg.cfi_eps)
    return Fidelity(load_target(cfg))


def optimizer_options(cfg, init_control=None):
    return OptimizerOptions(
        n_intervals=cfg.n_intervals,
        max_iters=cfg.max_iters,
        tol_phi_sd=cfg.tol_phi_sd,
        samples_per_interval=cfg.samples_per_interval,
        n_substeps=cfg.n_substeps,
        init_value=cfg.init_value,
        init_values=cfg.init_values,
        init_control=init_control,
        restarts=cfg.restarts,
        seed=cfg.seed,
        phase_init=cfg.phase_init,
        armijo_c1=cfg.armijo_c1,
        shrink=cfg.shrink,
        initial_step=cfg.initial_step,
    )


def output_dir(cfg):
    path = cfg.output_dir or os.environ.get(OUTPUT_ENV)
    if not path:
        raise ConfigError(f"output_dir: not set and ${OUTPUT_ENV} is empty")
    return Path(path)


# -- artifact writers ----------------------------------------------------------

def _fmt(x):
    return format(float(x), ".17g")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(x) for x in row])


def _json_value(x):
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return x


def _write_json(path, payload):
    text = json.dumps(payload, indent=2, sort_keys=True, default=_json_value)
    Path(path).write_text(text + "\n", encoding="utf-8")


def write_artifacts(directory, cfg, spec, result, levels=None):
    """Write summary.json, control.csv, diagnostics.csv (and probabilities.csv for CFI)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    control = result.control
    diag = result.diagnostics
    edges = control.edges
    _write_csv(directory / "control.csv", ("interval_start", "interval_end", "omega_value"),
               zip(edges[:-1], edges[1:], control.values))
    _write_csv(directory / "diagnostics.csv", ("t", "phi", "hc"),
               zip(diag.times, diag.phi, diag.hc))

    if cfg.cost == "cfi":
        eig = jx_eigensystem(spec.n_spins)
        fwd = evolve_forward(spec, control, samples_per_interval=cfg.samples_per_interval,
                             n_substeps=cfg.n_substeps)
        dist = measurement_distribution(fwd.final, eig, result.phase)
        _write_csv(directory / "probabilities.csv", ("m", "P_m", "dP_m"),
                   zip(eig.eigenvalues, dist.p, dist.dp_domega))

    n_sub = cfg.n_substeps or default_substeps(spec, control, cfg.samples_per_interval)
    summary = {
        "objective": result.objective,
        "cost": cfg.cost,
        "phi_mean": diag.phi_mean,
        "phi_sd": diag.phi_sd,
        "hc_mean": float(np.mean(diag.hc)),
        "hc_min": float(np.min(diag.hc)),
        "hc_max": float(np.max(diag.hc)),
        "phase": result.phase,
        "iterations": result.iterations,
        "status": result.status,
        "start_index": result.start_index,
        "wall_time": result.wall_time,
        "n_substeps_used": n_sub,
        "config": cfg.to_dict(),
    }
    if levels is not None:
        summary["continuation_levels"] = [
            {"n_intervals": r.control.n_intervals, "objective": r.objective,
             "phi_sd": r.diagnostics.phi_sd, "iterations": r.iterations, "status": r.status}
            for r in levels]
    _write_json(directory / "summary.json", summary)
    return summary


# -- subcommands -------------------------------------------------------------------

def execute(cfg, directory, init_control=None):
    """Optimise one configuration and write its artifacts; returns the result."""
    spec = problem_spec(cfg)
    cost = cost_kind(cfg)
    opts = optimizer_options(cfg, init_control)
    levels = None
    if cfg.continuation:
        levels = optimize_continuation(spec, cost, opts, cfg.continuation)
        result = levels[-1]
    else:
        result = optimize(spec, cost, opts)
    write_artifacts(directory, cfg, spec, result, levels)
    log.info("objective %.10g phi_sd %.3e (%s) -> %s", result.objective,
             result.diagnostics.phi_sd, result.status, directory)
    return result


def cmd_run(cfg):
    result = execute(cfg, output_dir(cfg))
    print(f"objective {result.objective:.10g} phi_sd {result.diagnostics.phi_sd:.3e} "
          f"status {result.status}")
    return EXIT_STALLED if result.status == STATUS_STALLED else EXIT_OK


def _sweep_value(axis, text):
    if axis == "n_intervals":
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"values: {text!r} is not an integer") from None
    return _parse_value(axis, text)


def cmd_sweep(cfg, axis, values):
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis: must be one of {', '.join(SWEEP_AXES)}")
    if not values:
        raise ConfigError("values: sweep needs at least one value")
    root = output_dir(cfg)
    rows = []
    stalled = False
    previous = None
    for value in values:
        run_cfg = validate(dataclasses.replace(cfg, **{axis: value}))
        init = None
        if cfg.warm_start and previous is not None:
            init = resample_control(previous.control.values, run_cfg.n_intervals)
        label = "none" if value is None else value
        result = execute(run_cfg, root / f"{axis}={label}", init)
        previous = result
        stalled |= result.status == STATUS_STALLED
        rows.append((math.inf if value is None else value, result.objective,
                     result.diagnostics.phi_sd, float(np.mean(result.diagnostics.hc))))
        print(f"{axis}={label}: objective {result.objective:.10g} "
              f"phi_sd {result.diagnostics.phi_sd:.3e} status {result.status}")
    _write_csv(root / "sweep.csv", ("value", "objective", "phi_sd", "hc_mean"), rows)
    return EXIT_STALLED if stalled else EXIT_OK


def verification_report(cfg):
    """Run the oracle checks on a seeded random control of the configured instance."""
    spec = problem_spec(cfg)
    cost = cost_kind(cfg)
    if isinstance(cost, CFI) and cfg.phase_init is not None:
        cost = cost.with_phase(cfg.phase_init)
    rng = np.random.default_rng(cfg.seed)
    values = rng.uniform(-2.0, 2.0, cfg.n_intervals)
    if cfg.u_max is not None:
        values = np.clip(values, -cfg.u_max, cfg.u_max)
    control = ControlProtocol(values, cfg.t_final)

    fwd = evolve_forward(spec, control)
    norm_err = float(np.max(np.abs(np.linalg.norm(fwd.first, axis=1) - 1.0)))
    overlap = float(np.max(np.abs(np.sum(fwd.first.conj() * fwd.second, axis=1))))
    d = spec.dim
    terminal = CostatePair(rng.normal(size=d) + 1j * rng.normal(size=d),
                           rng.normal(size=d) + 1j * rng.normal(size=d))
    drift = oracle.pairing_drift(spec, control, terminal)
    psi1_err = oracle.parameter_derivative_error(spec, control, cfg.omega_delta)
    grad = oracle.gradient_check(spec, control, cost, cfg.delta,
                                 costate_sign=cfg.costate_sign)

    checks = {
        "psi1_finite_difference": {"value": psi1_err, "tolerance": 1e-6,
                                   "passed": psi1_err <= 1e-6},
        "pairing_invariant": {"value": drift, "tolerance": 1e-9, "passed": drift <= 1e-9},
        "norm_conservation": {"value": norm_err, "tolerance": 1e-9, "passed": norm_err <= 1e-9},
        "gradient": dict(grad.to_dict(), tolerance=1e-3),
    }
    if spec.omega == 0.0:
        checks["orthogonality"] = {"value": overlap, "tolerance": 1e-9,
                                   "passed": overlap <= 1e-9}
    passed = all(c["passed"] for c in checks.values())
    return {"passed": passed, "control": values.tolist(), "checks": checks,
            "config": cfg.to_dict()}


def cmd_verify(cfg):
    report = verification_report(cfg)
    directory = output_dir(cfg)
    directory.mkdir(parents=True, exist_ok=True)
    _write_json(directory / "verify.json", report)
    for name, check in report["checks"].items():
        print(f"{name}: {'PASS' if check['passed'] else 'FAIL'}")
    if report["checks"]["gradient"]["truncation_dominated"]:
        print("gradient: finite-difference error is truncation dominated; reduce delta")
    return EXIT_OK if report["passed"] else EXIT_VERIFY_FAILED


def _read_control_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"control: {path} has no rows")
    try:
        start = np.array([float(r["interval_start"]) for r in rows])
        end = np.array([float(r["interval_end"]) for r in rows])
        values = np.array([float(r["omega_value"]) for r in rows])
    except KeyError as exc:
        raise ConfigError(f"control: missing column {exc} in {path}") from None
    if not np.isclose(start[0], 0.0):
        raise ConfigError("control: first interval must start at 0")
    return ControlProtocol(values, float(end[-1]))


def cmd_rescale(args):
    if not args.chi * args.n_spins > 0:
        raise ConfigError("chi: dimensionless rescaling needs n_spins * chi > 0")
    spec = ProblemSpec(args.n_spins, args.chi, t_final=1.0)
    control = _read_control_csv(args.control)
    out = (undo_rescale if args.inverse else dimensionless_rescale)(control, spec)
    edges = out.edges
    header = ("interval_start", "interval_end", "omega_value")
    rows = zip(edges[:-1], edges[1:], out.values)
    if args.output:
        _write_csv(args.output, header, rows)
    else:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(x) for x in row])
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------

def _add_config_flags(parser):
    parser.add_argument("--config", help="key = value configuration file")
    for name in _FIELD_TYPES:
        flags = [f"--{name}"]
        if "_" in name:
            flags.append(f"--{name.replace('_', '-')}")
        parser.add_argument(*flags, dest=name, default=None, metavar="VALUE")


def build_parser():
    parser = argparse.ArgumentParser(prog="pmpm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="optimise one configuration")
    _add_config_flags(p_run)

    p_sweep = sub.add_parser("sweep", help="optimise over a list of values of one setting")
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated values ('inf' or 'none' for no bound)")

    p_verify = sub.add_parser("verify", help="finite-difference and invariant checks")
    _add_config_flags(p_verify)

    p_rescale = sub.add_parser("rescale", help="dimensionless rescaling of a control.csv")
    p_rescale.add_argument("control", help="control.csv to rescale")
    p_rescale.add_argument("--n_spins", "--n-spins", type=int, required=True)
    p_rescale.add_argument("--chi", type=float, required=True)
    p_rescale.add_argument("--inverse", action="store_true",
                           help="map a dimensionless control back to physical time")
    p_rescale.add_argument("--output", help="output path (default: stdout)")
    return parser


def resolve_config(args, defaults=None):
    """Defaults, then the config file, then command-line flags."""
    values = dict(defaults or {})
    if args.config:
        values.update(read_config_file(args.config))
    for name in _FIELD_TYPES:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = _parse_value(name, flag)
    return validate(RunConfig(**values))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rescale":
            return cmd_rescale(args)
        if args.command == "verify":
            return cmd_verify(resolve_config(args, VERIFY_DEFAULTS))
        cfg = resolve_config(args)
        if args.command == "run":
            return cmd_run(cfg)
        values = [_sweep_value(args.axis, v) for v in args.values.split(",") if v.strip()]
        return cmd_sweep(cfg, args.axis, values)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"configuration error: output_dir: {exc}", file=sys.stderr)
        return EXIT_CONFIG
