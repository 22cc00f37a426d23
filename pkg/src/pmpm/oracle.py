"""Independent finite-difference and brute-force checks.

The oracle paths integrate with the literal RK5 stepping kernel (one step
matrix raised to the substep count) at four times the default substep
count.  They never touch the spectral propagators or the costate code, so
agreement with :mod:`pmpm.optimizer` gradients is a genuine cross-check.
"""
from dataclasses import asdict, dataclass
import itertools
import math

import numpy as np

from .costs import CFI, QFI, costate_boundary, terminal_cost
from .dynamics import (
    AugmentedState,
    ControlProtocol,
    CostatePair,
    augmented_generator,
    default_initial_state,
    default_substeps,
    evolve_costate_backward,
    evolve_forward,
    hamiltonian,
    rk5_step_matrix,
)
from .optimizer import interval_gradient, switching_function
from .spin import build_operators, jx_eigensystem

ORACLE_SUBSTEP_FACTOR = 4
MAX_GRID_EVALUATIONS = 10**6
MAX_GRID_INTERVALS = 3
# successive |D(d) - D(d/2)| ratios near 4 mark O(d^2) truncation error
TRUNCATION_RATIO = (3.0, 5.0)


def _oracle_substeps(spec, control, n_substeps):
    if n_substeps is not None:
        return int(n_substeps)
    return ORACLE_SUBSTEP_FACTOR * default_substeps(spec, control)


def _propagate(generator_of, control, state, n_sub):
    h = control.dt / n_sub
    x = np.asarray(state, dtype=complex)
    for value in control.values:
        step = rk5_step_matrix(generator_of(value), h)
        x = np.linalg.matrix_power(step, n_sub) @ x
    return x


def unitary_final_state(spec, control, psi_init=None, n_substeps=None):
    """psi0(T) from the psi0 block alone (literal RK5, oracle substeps)."""
    n_sub = _oracle_substeps(spec, control, n_substeps)
    if psi_init is None:
        psi_init = default_initial_state(spec.n_spins).psi0
    return _propagate(lambda v: -1j * hamiltonian(spec, v), control, psi_init, n_sub)


def augmented_final_state(spec, control, n_substeps=None):
    """(psi0, psi1)(T) from the dense augmented generator (literal RK5)."""
    n_sub = _oracle_substeps(spec, control, n_substeps)
    init = default_initial_state(spec.n_spins)
    x0 = np.concatenate([init.psi0, init.psi1])
    x = _propagate(lambda v: augmented_generator(spec, v), control, x0, n_sub)
    d = spec.dim
    return AugmentedState(x[:d], x[d:])


def fd_parameter_derivative(spec, control, delta=1e-4, n_substeps=None):
    """Central difference [psi0(T; w + d) - psi0(T; w - d)] / 2d."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    n_sub = _oracle_substeps(spec, control, n_substeps)
    plus = unitary_final_state(spec.with_omega(spec.omega + delta), control, n_substeps=n_sub)
    minus = unitary_final_state(spec.with_omega(spec.omega - delta), control, n_substeps=n_sub)
    return (plus - minus) / (2.0 * delta)


def _eig_for(cost, spec):
    return jx_eigensystem(spec.n_spins) if isinstance(cost, CFI) else None


def oracle_cost(spec, control, cost, n_substeps=None):
    """Scalar cost C (the minimised quantity) via the literal kernel."""
    final = augmented_final_state(spec, control, n_substeps)
    return terminal_cost(cost, final, _eig_for(cost, spec))[0]


def fd_cost_gradient(spec, control, cost, index, delta=1e-6, n_substeps=None):
    """Central difference of the cost C with respect to Omega_index."""
    if not 0 <= index < control.n_intervals:
        raise IndexError(f"interval index {index} out of range")
    if not delta > 0:
        raise ValueError("delta must be positive")
    n_sub = _oracle_substeps(spec, control, n_substeps)

    def shifted(sign):
        values = np.array(control.values)
        values[index] += sign * delta
        return oracle_cost(spec, ControlProtocol(values, control.t_final), cost, n_sub)

    return (shifted(1.0) - shifted(-1.0)) / (2.0 * delta)


@dataclass(frozen=True)
class GridSearchResult:
    control: ControlProtocol
    objective: float
    n_evaluated: int


def exhaustive_small_search(spec, cost, n_intervals, grid, n_substeps=None):
    """Evaluate every control in grid^n_intervals and return the best one."""
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("grid must not be empty")
    if not all(math.isfinite(g) for g in grid):
        raise ValueError("grid values must be finite")
    if not 1 <= n_intervals <= MAX_GRID_INTERVALS:
        raise ValueError(f"exhaustive search supports 1..{MAX_GRID_INTERVALS} intervals")
    size = len(grid) ** n_intervals
    if size > MAX_GRID_EVALUATIONS:
        raise ValueError(f"grid search of {size} points refused (limit {MAX_GRID_EVALUATIONS})")
    eig = _eig_for(cost, spec)
    best = None
    for values in itertools.product(grid, repeat=n_intervals):
        control = ControlProtocol(np.array(values), spec.t_final)
        final = augmented_final_state(spec, control, n_substeps)
        objective = terminal_cost(cost, final, eig)[1]
        if best is None or objective > best[1]:
            best = (control, objective)
    return GridSearchResult(best[0], float(best[1]), size)


# -- gradient report -------------------------------------------------------------

@dataclass(frozen=True)
class GradientCheckReport:
    """Finite-difference gradient versus the interval averages of Phi.

    ``constant`` is the least-squares factor c in fd_i ~ c * g_i with
    g_i = dt * mean(Phi on interval i); the analytic value is 2.
    """

    cost: str
    delta: float
    fd_gradient: list
    phi_gradient: list
    relative_errors: list
    max_relative_error: float
    constant: float
    constant_spread: float
    truncation_estimate: float
    halving_ratios: list
    truncation_dominated: bool
    proportional: bool
    positive_constant: bool
    passed: bool

    def to_dict(self):
        return asdict(self)


def phi_gradient(spec, control, cost, samples_per_interval=32, n_substeps=None,
                 costate_sign=1.0):
    """Interval averages g_i = dt * mean(Phi) from the forward/costate sweep.

    ``costate_sign`` multiplies the terminal costate; anything but +1 is a
    deliberate corruption used to check that the report catches it.
    """
    eig = _eig_for(cost, spec)
    fwd = evolve_forward(spec, control, samples_per_interval=samples_per_interval,
                         n_substeps=n_substeps)
    boundary, _ = costate_boundary(cost, fwd.final, eig)
    boundary = CostatePair(costate_sign * boundary.pi0, costate_sign * boundary.pi1)
    bwd = evolve_costate_backward(spec, control, boundary, samples_per_interval,
                                  n_substeps=fwd.n_substeps)
    phi = switching_function(fwd, bwd, build_operators(spec.n_spins))
    return interval_gradient(phi, samples_per_interval, control.dt)


def gradient_check(spec, control, cost=None, delta=1e-6, samples_per_interval=32,
                   spread_tol=1e-3, costate_sign=1.0):
    """Compare Phi-based interval gradients with central differences of C."""
    cost = QFI() if cost is None else cost
    g = phi_gradient(spec, control, cost, samples_per_interval, costate_sign=costate_sign)
    fd, *finer = (
        np.array([fd_cost_gradient(spec, control, cost, i, d)
                  for i in range(control.n_intervals)])
        for d in (delta, delta / 2, delta / 4, delta / 8))

    scale = max(float(np.max(np.abs(fd))), 1e-300)
    gg = float(g @ g)
    constant = float(g @ fd) / gg if gg > 0 else 0.0
    resid = np.abs(constant * g - fd) / scale
    # ratio spread over intervals whose gradient is not negligible
    big = np.abs(fd) > 1e-3 * scale
    if constant != 0.0 and np.any(big):
        ratios = fd[big] / g[big]
        spread = float((ratios.max() - ratios.min()) / abs(constant))
    else:
        spread = math.inf

    # O(d^2) truncation shrinks 4x per halving of d; round-off noise grows instead
    diffs = [float(np.max(np.abs(a - b))) for a, b in zip([fd] + finer, finer)]
    ratios = [a / b if b > 0 else math.inf for a, b in zip(diffs, diffs[1:])]
    truncation_dominated = all(TRUNCATION_RATIO[0] <= r <= TRUNCATION_RATIO[1] for r in ratios)

    proportional = spread <= spread_tol
    positive = constant > 0
    return GradientCheckReport(
        cost=cost.name,
        delta=float(delta),
        fd_gradient=fd.tolist(),
        phi_gradient=g.tolist(),
        relative_errors=resid.tolist(),
        max_relative_error=float(resid.max()),
        constant=constant,
        constant_spread=spread,
        truncation_estimate=diffs[0] * 4.0 / 3.0,
        halving_ratios=ratios,
        truncation_dominated=bool(truncation_dominated),
        proportional=bool(proportional),
        positive_constant=bool(positive),
        passed=bool(proportional and positive),
    )


def parameter_derivative_error(spec, control, delta=1e-4, samples_per_interval=8):
    """Relative error between evolve_forward's psi1(T) and the finite difference."""
    fwd = evolve_forward(spec, control, samples_per_interval=samples_per_interval)
    fd = fd_parameter_derivative(spec, control, delta)
    psi1 = fwd.final.psi1
    return float(np.linalg.norm(psi1 - fd) / np.linalg.norm(psi1))


def pairing_drift(spec, control, terminal, samples_per_interval=8):
    """Peak-to-peak variation of <pi0|psi0> + <pi1|psi1> along the trajectory."""
    fwd = evolve_forward(spec, control, samples_per_interval=samples_per_interval)
    bwd = evolve_costate_backward(spec, control, terminal, samples_per_interval,
                                  n_substeps=fwd.n_substeps)
    pairing = (np.sum(bwd.first.conj() * fwd.first, axis=1)
               + np.sum(bwd.second.conj() * fwd.second, axis=1))
    return float(np.max(np.abs(pairing - pairing[0])))
