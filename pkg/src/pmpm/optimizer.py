"""Switching-function diagnostics and projected gradient descent on the controls.

The switching function Phi(t) = Im(<pi0|Jx|psi0> + <pi1|Jx|psi1>) is local in
time.  With the costate convention of :mod:`pmpm.costs` the functional
derivative of the terminal cost is dC/dOmega(t) = 2 Phi(t), so the gradient
with respect to interval value Omega_i is 2 * integral of Phi over interval i.
"""
from dataclasses import dataclass, field, replace
import logging
import math
import time

import numpy as np

from .costs import CFI, QFI, Fidelity, costate_boundary, terminal_cost
from .dynamics import (
    DEFAULT_SAMPLES_PER_INTERVAL,
    ControlProtocol,
    evolve_costate_backward,
    evolve_forward,
    final_state,
)
from .spin import build_operators, jx_eigensystem

log = logging.getLogger(__name__)

STATUS_CONVERGED = "converged"
STATUS_STAGNATED = "stagnated"
STATUS_MAX_ITERS = "max_iters"
STATUS_STALLED = "stalled"


@dataclass(frozen=True)
class DiagnosticsSeries:
    times: np.ndarray
    phi: np.ndarray
    hc: np.ndarray
    phi_mean: float
    phi_sd: float


@dataclass
class OptimizerOptions:
    n_intervals: int = 64
    max_iters: int = 2000
    tol_phi_sd: float | None = None
    samples_per_interval: int = DEFAULT_SAMPLES_PER_INTERVAL
    n_substeps: int | None = None
    init_value: float = 1.0
    init_values: tuple = ()
    init_control: np.ndarray | None = None
    restarts: int = 0
    seed: int = 0
    phase_init: float | None = None
    armijo_c1: float = 1e-4
    shrink: float = 0.5
    initial_step: float | None = None
    stall_window: int = 50
    stall_rtol: float = 1e-10
    min_step: float = 1e-14

    def __post_init__(self):
        if self.n_intervals < 1:
            raise ValueError("n_intervals must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")

    def phi_sd_tolerance(self, cost):
        if self.tol_phi_sd is not None:
            return self.tol_phi_sd
        return 1e-2 if isinstance(cost, CFI) else 1e-3


@dataclass
class OptimizationResult:
    control: ControlProtocol
    objective: float
    diagnostics: DiagnosticsSeries
    iterations: int
    status: str
    phase: float | None = None
    history: list = field(default_factory=list)
    start_index: int = 0
    wall_time: float = 0.0


# -- diagnostics -------------------------------------------------------------------

def _check_grids(fwd, bwd):
    if fwd.times.shape != bwd.times.shape or not np.allclose(fwd.times, bwd.times, rtol=0,
                                                             atol=1e-12):
        raise ValueError("forward and costate trajectories are sampled on different grids")


def switching_function(fwd, bwd, ops):
    """Phi(t) = Im(<pi0|Jx|psi0> + <pi1|Jx|psi1>) at every sample."""
    _check_grids(fwd, bwd)
    jx = ops.jx
    val = (np.sum(bwd.first.conj() * (fwd.first @ jx.T), axis=1)
           + np.sum(bwd.second.conj() * (fwd.second @ jx.T), axis=1))
    return val.imag


def control_hamiltonian(fwd, bwd, ops, spec, control):
    """H_c(t) = Im(<pi0|H|psi0> + <pi1|Jz|psi0> + <pi1|H|psi1>) at every sample."""
    _check_grids(fwd, bwd)
    m = ops.m
    omega_t = control.values[fwd.interval_of_samples()][:, None]
    diag = spec.chi * m**2 + spec.omega * m

    def apply_h(x):
        return diag * x + omega_t * (x @ ops.jx.T)

    val = (np.sum(bwd.first.conj() * apply_h(fwd.first), axis=1)
           + np.sum(bwd.second.conj() * (m * fwd.first), axis=1)
           + np.sum(bwd.second.conj() * apply_h(fwd.second), axis=1))
    return val.imag


def phi_statistics(phi, t_final):
    """Mean and root-mean-square of Phi over [0, T] by trapezoid quadrature.

    ``phi`` is sampled on a uniform grid spanning [0, t_final].
    """
    phi = np.asarray(phi, dtype=float)
    if phi.size < 2:
        raise ValueError("need at least two samples")
    dt = t_final / (phi.size - 1)
    mean = np.trapezoid(phi, dx=dt) / t_final
    sd = math.sqrt(np.trapezoid(phi**2, dx=dt) / t_final)
    return float(mean), float(sd)


def _interval_weights(k):
    """Quadrature weights (summing to 1) for the k+1 samples of one interval."""
    if k % 2 == 0:
        w = np.ones(k + 1)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        return w / (3.0 * k)
    w = np.ones(k + 1)
    w[0] = w[-1] = 0.5
    return w / k


def interval_gradient(phi, samples_per_interval, dt):
    """g_i = dt * (average of Phi over interval i), Simpson's rule when K is even."""
    k = samples_per_interval
    n_t = (phi.size - 1) // k
    idx = np.arange(n_t)[:, None] * k + np.arange(k + 1)[None, :]
    return dt * (phi[idx] @ _interval_weights(k))


def project_control(values, u_max):
    """Clamp each control value to [-u_max, u_max] (closest bang value)."""
    values = np.asarray(values, dtype=float)
    if u_max is None:
        return values.copy()
    if not u_max > 0:
        raise ValueError("u_max must be positive")
    return np.clip(values, -u_max, u_max)


def resample_control(values, n_intervals):
    """Piecewise-constant resampling onto ``n_intervals`` equal intervals.

    Each new interval takes the value of the old interval containing its
    midpoint, so refining by an integer factor leaves the protocol unchanged.
    """
    values = np.asarray(values, dtype=float)
    mids = (np.arange(n_intervals) + 0.5) / n_intervals
    return values[np.minimum((mids * values.size).astype(int), values.size - 1)]


def dimensionless_rescale(control, spec):
    """Control as a function of s = N chi t, divided by N chi."""
    scale = spec.n_spins * spec.chi
    if not scale > 0:
        raise ValueError("dimensionless rescaling needs N * chi > 0")
    return ControlProtocol(control.values / scale, control.t_final * scale)


def undo_rescale(rescaled, spec):
    scale = spec.n_spins * spec.chi
    if not scale > 0:
        raise ValueError("dimensionless rescaling needs N * chi > 0")
    return ControlProtocol(rescaled.values * scale, rescaled.t_final / scale)


# -- optimisation ------------------------------------------------------------------

@dataclass
class _Evaluation:
    values: np.ndarray
    phase: float | None
    cost: float
    objective: float
    fwd: object = None
    bwd: object = None
    phi: np.ndarray = None
    grad: np.ndarray = None
    dphase: float | None = None
    phi_sd: float = math.nan


class _Problem:
    """Cost/gradient oracle for one (spec, cost) pair at fixed integrator settings."""

    def __init__(self, spec, cost, opts):
        if isinstance(cost, Fidelity) and cost.target.shape != (spec.dim,):
            raise ValueError("fidelity target dimension does not match n_spins")
        self.spec = spec
        self.cost = cost
        self.k = opts.samples_per_interval
        self.n_substeps = opts.n_substeps
        self.ops = build_operators(spec.n_spins)
        self.eig = jx_eigensystem(spec.n_spins) if isinstance(cost, CFI) else None

    def _kind(self, phase):
        return self.cost.with_phase(phase) if isinstance(self.cost, CFI) else self.cost

    def control(self, values):
        return ControlProtocol(values, self.spec.t_final)

    def terminal(self, values):
        return final_state(self.spec, self.control(values), samples_per_interval=self.k,
                           n_substeps=self.n_substeps)

    def cost_of(self, values, phase=None, final=None):
        if final is None:
            final = self.terminal(values)
        return terminal_cost(self._kind(phase), final, self.eig)

    def full(self, values, phase=None):
        control = self.control(values)
        fwd = evolve_forward(self.spec, control, samples_per_interval=self.k,
                             n_substeps=self.n_substeps)
        kind = self._kind(phase)
        cost, objective = terminal_cost(kind, fwd.final, self.eig)
        boundary, dphase = costate_boundary(kind, fwd.final, self.eig)
        bwd = evolve_costate_backward(self.spec, control, boundary, samples_per_interval=self.k,
                                      n_substeps=fwd.n_substeps)
        phi = switching_function(fwd, bwd, self.ops)
        grad = 2.0 * interval_gradient(phi, self.k, control.dt)
        _, phi_sd = phi_statistics(phi, self.spec.t_final)
        return _Evaluation(np.asarray(values, dtype=float), phase, cost, objective, fwd, bwd,
                           phi, grad, dphase, phi_sd)

    def diagnostics(self, ev):
        control = self.control(ev.values)
        hc = control_hamiltonian(ev.fwd, ev.bwd, self.ops, self.spec, control)
        mean, sd = phi_statistics(ev.phi, self.spec.t_final)
        return DiagnosticsSeries(ev.fwd.times, ev.phi, hc, mean, sd)


def _phase_step(problem, ev, step, c1, shrink, min_step):
    """One Armijo ascent step of the CFI phase; the terminal state is unchanged."""
    final = ev.fwd.final
    gamma = step * 2.0
    slope = ev.dphase
    if slope == 0.0:
        return ev.phase, ev.cost, ev.objective, step
    while gamma >= min_step:
        phase = (ev.phase + gamma * slope) % (2 * math.pi)
        cost, objective = problem.cost_of(None, phase, final=final)
        if math.isfinite(cost) and cost <= ev.cost - c1 * gamma * slope**2:
            return phase, cost, objective, gamma
        gamma *= shrink
    return ev.phase, ev.cost, ev.objective, step


def _descend(problem, values, phase, opts, tol):
    """Projected gradient descent from one starting point."""
    u_max = problem.spec.u_max
    c1, shrink = opts.armijo_c1, opts.shrink
    ev = problem.full(project_control(values, u_max), phase)
    history = [(0, ev.objective, ev.phi_sd, 0.0)]
    step = opts.initial_step
    if step is None:
        step = 1.0 / max(np.max(np.abs(ev.grad)), 1e-300)
    phase_step = 1.0
    status = STATUS_MAX_ITERS
    costs = [ev.cost]
    iteration = 0
    for iteration in range(1, opts.max_iters + 1):
        if ev.phi_sd < tol:
            status = STATUS_CONVERGED
            iteration -= 1
            break
        gamma = 2.0 * step
        accepted = None
        while gamma >= opts.min_step:
            cand = project_control(ev.values - gamma * ev.grad, u_max)
            delta = cand - ev.values
            if not np.any(delta):
                break
            cost, _ = problem.cost_of(cand, ev.phase)
            if math.isfinite(cost) and cost <= ev.cost + c1 * float(ev.grad @ delta):
                accepted = cand
                break
            gamma *= shrink
        if accepted is None:
            # projected step is zero (bang-saturated stationary point) or line search underflow
            status = STATUS_CONVERGED if gamma >= opts.min_step else STATUS_STALLED
            iteration -= 1
            break
        step = gamma
        ev = problem.full(accepted, ev.phase)
        if ev.dphase is not None:
            new_phase, _, _, phase_step = _phase_step(problem, ev, phase_step, c1, shrink,
                                                      opts.min_step)
            if new_phase != ev.phase:
                ev = problem.full(ev.values, new_phase)
        costs.append(ev.cost)
        history.append((iteration, ev.objective, ev.phi_sd, step))
        if iteration % 100 == 0:
            log.debug("iter %d objective %.10g phi_sd %.3e step %.3e", iteration,
                      ev.objective, ev.phi_sd, step)
        w = opts.stall_window
        if len(costs) > w:
            old = costs[-w - 1]
            if abs(old - ev.cost) <= opts.stall_rtol * max(abs(old), 1e-300):
                status = STATUS_STAGNATED
                break
    return ev, iteration, status, history


def _starting_points(spec, cost, opts):
    n_t = opts.n_intervals
    if opts.init_control is not None:
        first = np.asarray(opts.init_control, dtype=float)
        if first.shape != (n_t,):
            raise ValueError(f"init_control must have length {n_t}")
    else:
        first = np.full(n_t, float(opts.init_value))
    controls = [first] + [np.full(n_t, float(v)) for v in opts.init_values]
    rng = np.random.default_rng(opts.seed)
    for _ in range(opts.restarts):
        controls.append(rng.uniform(-2.0, 2.0, n_t))
    if isinstance(cost, CFI):
        phases = [cost.phase] if opts.phase_init is None else [opts.phase_init]
        if opts.phase_init is None and not np.isclose(cost.phase, math.pi / 2):
            phases.append(math.pi / 2)
    else:
        phases = [None]
    return [(c, p) for c in controls for p in phases]


def optimize(spec, cost=None, opts=None):
    """Maximise QFI / CFI / fidelity over piecewise-constant controls.

    Runs projected gradient descent with Armijo backtracking from every
    starting point (the constant default, any extra constant amplitudes in
    ``init_values``, seeded random restarts, and for
    CFI the phase restarts 0 and pi/2) and returns the best iterate found.
    """
    cost = QFI() if cost is None else cost
    opts = OptimizerOptions() if opts is None else opts
    t_start = time.perf_counter()
    problem = _Problem(spec, cost, opts)
    tol = opts.phi_sd_tolerance(cost)

    best = None
    for index, (values, phase) in enumerate(_starting_points(spec, cost, opts)):
        ev, iterations, status, history = _descend(problem, values, phase, opts, tol)
        log.info("start %d: objective %.10g after %d iterations (%s)", index, ev.objective,
                 iterations, status)
        if best is None or ev.objective > best[0].objective:
            best = (ev, iterations, status, history, index)

    ev, iterations, status, history, index = best
    return OptimizationResult(
        control=problem.control(ev.values),
        objective=float(ev.objective),
        diagnostics=problem.diagnostics(ev),
        iterations=iterations,
        status=status,
        phase=ev.phase,
        history=history,
        start_index=index,
        wall_time=time.perf_counter() - t_start,
    )



def optimize_continuation(spec, cost=None, opts=None, levels=(8, 16, 32)):
    """Optimise on successively finer grids, seeding each from the last optimum.

    ``levels`` lists the coarser interval counts; the final level is
    ``opts.n_intervals``.  Only the first level uses ``opts``' starting
    points and restarts.  Returns one result per level, finest last.
    """
    cost = QFI() if cost is None else cost
    opts = OptimizerOptions() if opts is None else opts
    schedule = [n for n in levels if n < opts.n_intervals] + [opts.n_intervals]
    results = []
    for n_t in schedule:
        if results:
            prev = results[-1]
            level_opts = replace(opts, n_intervals=n_t, restarts=0, init_values=(),
                                 phase_init=prev.phase,
                                 init_control=resample_control(prev.control.values, n_t))
        else:
            init = opts.init_control
            if init is not None:
                init = resample_control(init, n_t)
            level_opts = replace(opts, n_intervals=n_t, init_control=init)
        results.append(optimize(spec, cost, level_opts))
        log.info("continuation level %d: objective %.10g", n_t, results[-1].objective)
    return results
