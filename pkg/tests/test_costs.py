import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmpm.costs import (
    CFI,
    QFI,
    Fidelity,
    cfi_costate_boundary,
    cfi_value,
    costate_boundary,
    fidelity_costate_boundary,
    fidelity_value,
    measurement_distribution,
    qfi_cost,
    qfi_costate_boundary,
    qfi_value,
    terminal_cost,
)
from pmpm.dynamics import AugmentedState, ControlProtocol, ProblemSpec, evolve_forward, final_state
from pmpm.spin import coherent_x_state, hl_state, jx_eigensystem

seeds = st.integers(0, 2**32 - 1)


def random_augmented(rng, dim):
    psi0 = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    psi1 = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    return AugmentedState(psi0 / np.linalg.norm(psi0), psi1)


def evolved(n, chi, values):
    return final_state(ProblemSpec(n, chi), ControlProtocol(values))


def wirtinger_fd(cost_fn, state, which, step=1e-6):
    """dC/d<psi| by central differences in the real and imaginary parts."""
    base = [state.psi0.copy(), state.psi1.copy()]
    grad = np.zeros(base[which].size, complex)
    for n in range(grad.size):
        parts = []
        for direction in (1.0, 1j):
            vals = []
            for sign in (1, -1):
                shifted = [b.copy() for b in base]
                shifted[which][n] += sign * step * direction
                vals.append(cost_fn(AugmentedState(*shifted)))
            parts.append((vals[0] - vals[1]) / (2 * step))
        grad[n] = 0.5 * (parts[0] + 1j * parts[1])
    return grad


def assert_close_rel(actual, expected, rel):
    scale = max(np.max(np.abs(expected)), 1e-12)
    assert np.max(np.abs(actual - expected)) <= rel * scale


class TestQFI:
    def test_zero_derivative(self):
        s = AugmentedState(coherent_x_state(4), np.zeros(5, complex))
        assert qfi_value(s) == 0.0

    @pytest.mark.parametrize("n", [2, 10, 50])
    @pytest.mark.parametrize("chi,t", [(0.0, 1.0), (3.0, 0.5)])
    def test_heisenberg_limit(self, n, chi, t):
        spec = ProblemSpec(n, chi, t_final=t)
        psi = hl_state(n)
        init = AugmentedState(psi, np.zeros_like(psi))
        fwd = evolve_forward(spec, ControlProtocol([0.0], t), init)
        assert qfi_value(fwd.final) == pytest.approx(n**2 * t**2, rel=1e-6)

    def test_shot_noise_limit(self):
        fin = evolved(10, 0.0, [0.0])
        assert qfi_value(fin) == pytest.approx(10.0, rel=1e-6)

    def test_reported_scale(self):
        s = random_augmented(np.random.default_rng(0), 6)
        assert qfi_value(s) == pytest.approx(-4 * qfi_cost(s))

    @given(seeds, st.floats(0, 2 * math.pi))
    def test_global_phase_invariance(self, seed, theta):
        s = random_augmented(np.random.default_rng(seed), 7)
        z = np.exp(1j * theta)
        rotated = AugmentedState(z * s.psi0, z * s.psi1)
        assert qfi_value(rotated) == pytest.approx(qfi_value(s), rel=1e-12, abs=1e-12)

    def test_boundary_zero_derivative(self):
        b = qfi_costate_boundary(AugmentedState(coherent_x_state(3), np.zeros(4, complex)))
        assert not np.any(b.pi0) and not np.any(b.pi1)

    def test_boundary_orthogonal_final(self):
        fin = evolved(6, 2.0, [0.5, -1.2, 2.0, 0.7])
        b = qfi_costate_boundary(fin)
        np.testing.assert_allclose(b.pi0, 0, atol=1e-9)
        np.testing.assert_allclose(b.pi1, -fin.psi1, atol=1e-9)

    @given(seeds)
    @settings(max_examples=20)
    def test_boundary_is_wirtinger_derivative(self, seed):
        s = random_augmented(np.random.default_rng(seed), 5)
        b = qfi_costate_boundary(s)
        assert_close_rel(b.pi0, wirtinger_fd(qfi_cost, s, 0), 1e-4)
        assert_close_rel(b.pi1, wirtinger_fd(qfi_cost, s, 1), 1e-4)


class TestMeasurementDistribution:
    def test_coherent_state_is_eigenstate(self):
        n = 6
        s = AugmentedState(coherent_x_state(n), np.zeros(n + 1, complex))
        dist = measurement_distribution(s, jx_eigensystem(n), 0.0)
        assert dist.p[0] == pytest.approx(1.0, abs=1e-12)

    @given(seeds, st.floats(0, 2 * math.pi))
    @settings(max_examples=30)
    def test_normalisation(self, seed, phase):
        rng = np.random.default_rng(seed)
        fin = evolved(5, 1.0, rng.uniform(-3, 3, 3))
        dist = measurement_distribution(fin, jx_eigensystem(5), phase)
        assert dist.p.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(dist.p >= 0)
        assert abs(dist.dp_domega.sum()) <= 1e-9

    @pytest.mark.parametrize("n,period", [(4, 2 * math.pi), (5, 4 * math.pi)])
    def test_phase_periodicity(self, n, period):
        fin = evolved(n, 1.0, [1.0, -0.5])
        eig = jx_eigensystem(n)
        a = measurement_distribution(fin, eig, 0.3)
        b = measurement_distribution(fin, eig, 0.3 + period)
        np.testing.assert_allclose(a.p, b.p, atol=1e-12)
        np.testing.assert_allclose(a.dp_domega, b.dp_domega, atol=1e-12)


class TestCFI:
    def test_phase_normalised(self):
        assert 0 <= CFI(7.0).phase < 2 * math.pi
        assert CFI(-math.pi / 2).phase == pytest.approx(3 * math.pi / 2)

    def test_zero_derivative(self):
        s = AugmentedState(coherent_x_state(3), np.zeros(4, complex))
        dist = measurement_distribution(s, jx_eigensystem(3), 0.4)
        assert cfi_value(dist) == 0.0
        b, dphi = cfi_costate_boundary(s, jx_eigensystem(3), 0.4)
        assert not np.any(b.pi1)
        assert dphi == 0.0

    @given(st.integers(1, 12), seeds, st.sampled_from([0.0, math.pi]))
    @settings(max_examples=20, deadline=None)
    def test_vanishes_without_phase_offset(self, n, seed, phase):
        # a pi rotation about x fixes the start, J_x and J_z^2 but flips J_z,
        # so P_m is even in omega whenever the phase offset is 0 or pi
        rng = np.random.default_rng(seed)
        fin = evolved(n, 1.0, rng.uniform(-4, 4, 3))
        dist = measurement_distribution(fin, jx_eigensystem(n), phase)
        assert np.max(np.abs(dist.dp_domega)) <= 1e-9

    @given(st.integers(2, 12), seeds)
    @settings(max_examples=20, deadline=None)
    def test_small_phase_limit_is_finite(self, n, seed):
        # at phase 0 every second J_x outcome is empty; just off it those outcomes
        # carry P ~ phase^2 and dP ~ phase, so the CFI tends to a finite limit
        rng = np.random.default_rng(seed)
        fin = evolved(n, 1.0, rng.uniform(-4, 4, 3))
        eig = jx_eigensystem(n)
        p0 = measurement_distribution(fin, eig, 0.0).p
        assert np.all(p0[1::2] <= 1e-12) or np.all(p0[0::2] <= 1e-12)
        # a negligible clamp isolates the limit from the default 1e-10 floor
        near, nearer = (cfi_value(measurement_distribution(fin, eig, h), eps=1e-300)
                        for h in (1e-3, 1e-4))
        qfi = qfi_value(fin)
        assert abs(nearer - near) <= 1e-4 * qfi
        assert nearer <= qfi * (1 + 1e-6)

    def test_frozen_reference(self):
        # literal-kernel oracle value
        fin = evolved(6, 2.0, [0.5, -1.2, 2.0, 0.7])
        dist = measurement_distribution(fin, jx_eigensystem(6), math.pi / 2)
        assert cfi_value(dist) == pytest.approx(4.008644195557812, rel=1e-9)

    def test_bounded_by_qfi_on_random_controls(self):
        rng = np.random.default_rng(11)
        eig = jx_eigensystem(6)
        for _ in range(100):
            fin = evolved(6, 2.0, rng.uniform(-4, 4, 4))
            q = qfi_value(fin)
            for phase in (0.0, math.pi / 2, rng.uniform(0, 2 * math.pi)):
                c = cfi_value(measurement_distribution(fin, eig, phase))
                assert c <= q * (1 + 1e-6)

    @given(seeds, st.floats(0, 2 * math.pi))
    @settings(max_examples=15, deadline=None)
    def test_boundary_is_wirtinger_derivative(self, seed, phase):
        n = 4
        eig = jx_eigensystem(n)
        s = random_augmented(np.random.default_rng(seed), n + 1)

        def cost(state):
            return -cfi_value(measurement_distribution(state, eig, phase))

        b, _ = cfi_costate_boundary(s, eig, phase)
        assert_close_rel(b.pi0, wirtinger_fd(cost, s, 0), 1e-4)
        assert_close_rel(b.pi1, wirtinger_fd(cost, s, 1), 1e-4)

    @given(seeds, st.floats(0, 2 * math.pi))
    @settings(max_examples=15)
    def test_phase_derivative(self, seed, phase):
        eig = jx_eigensystem(4)
        s = random_augmented(np.random.default_rng(seed), 5)
        _, dphi = cfi_costate_boundary(s, eig, phase)
        h = 1e-6
        fd = (cfi_value(measurement_distribution(s, eig, phase + h))
              - cfi_value(measurement_distribution(s, eig, phase - h))) / (2 * h)
        assert dphi == pytest.approx(fd, rel=1e-4, abs=1e-6)

    def test_clamped_terms_use_clamped_denominator(self):
        # outcome 1 has P ~ 1e-12 < eps but dP != 0, so its term is dP^2 / eps
        eig = jx_eigensystem(1)
        psi0 = eig.u[0] + 1e-6 * eig.u[1]
        s = AugmentedState(psi0 / np.linalg.norm(psi0) + 0j, eig.u[1] + 0j)
        dist = measurement_distribution(s, eig, 0.0)
        assert dist.p[1] < 1e-10
        expected = dist.dp_domega[0] ** 2 / dist.p[0] + dist.dp_domega[1] ** 2 / 1e-10
        assert cfi_value(dist) == pytest.approx(expected, rel=1e-12)

        def cost(state):
            return -cfi_value(measurement_distribution(state, eig, 0.0))

        b, _ = cfi_costate_boundary(s, eig, 0.0)
        assert_close_rel(b.pi0, wirtinger_fd(cost, s, 0, step=1e-8), 1e-4)
        assert_close_rel(b.pi1, wirtinger_fd(cost, s, 1, step=1e-8), 1e-4)


class TestFidelity:
    def test_perfect_overlap(self):
        psi = hl_state(4)
        assert fidelity_value(psi, psi) == pytest.approx(1.0)

    def test_orthogonal(self):
        target = hl_state(4)
        psi = np.zeros(5, complex)
        psi[2] = 1.0
        assert fidelity_value(psi, target) == 0.0
        b = fidelity_costate_boundary(AugmentedState(psi, np.zeros(5, complex)), target)
        assert not np.any(b.pi0) and not np.any(b.pi1)

    def test_rejects_unnormalised_target(self):
        with pytest.raises(ValueError):
            Fidelity(np.ones(3))

    @given(seeds)
    @settings(max_examples=20)
    def test_boundary_is_wirtinger_derivative(self, seed):
        rng = np.random.default_rng(seed)
        s = random_augmented(rng, 5)
        kind = Fidelity(hl_state(4))

        def cost(state):
            return terminal_cost(kind, state)[0]

        b, dphi = costate_boundary(kind, s)
        assert dphi is None
        assert_close_rel(b.pi0, wirtinger_fd(cost, s, 0), 1e-4)
        assert not np.any(b.pi1)


class TestDispatch:
    def test_cfi_requires_eigensystem(self):
        s = random_augmented(np.random.default_rng(0), 3)
        with pytest.raises(ValueError):
            terminal_cost(CFI(), s)

    def test_unknown_kind(self):
        s = random_augmented(np.random.default_rng(0), 3)
        with pytest.raises(TypeError):
            terminal_cost("qfi", s)

    def test_objective_signs(self):
        s = random_augmented(np.random.default_rng(2), 4)
        cost, objective = terminal_cost(QFI(), s)
        assert objective == pytest.approx(-4 * cost)
        cost, objective = terminal_cost(CFI(0.2), s, jx_eigensystem(3))
        assert objective == pytest.approx(-cost)
