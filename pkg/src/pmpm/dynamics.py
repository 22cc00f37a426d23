"""Forward augmented dynamics and backward costate dynamics.

The forward system evolves the pair (psi0, psi1) = (psi, d psi / d omega)::

    d/dt [psi0]   [-iH    0 ] [psi0]
         [psi1] = [-iJz  -iH] [psi1]

and the costates (pi0, pi1) evolve under the negative adjoint generator::

    d/dt [pi0]   [-iH  -iJz] [pi0]
         [pi1] = [ 0   -iH ] [pi1]

with H = chi Jz^2 + omega Jz + Omega_i Jx on control interval i.

Time stepping is a fixed-step explicit Runge-Kutta scheme of order 5
(Dormand-Prince weights).  Because the generator is constant on each
interval, ``n`` RK steps of size ``h`` equal the stability polynomial
``R(hG)^n``.  For the block-triangular generators above this is evaluated
in the eigenbasis of H: the diagonal blocks are ``R(-i h e)^n`` and the
coupling block is the divided difference of ``R(z)^n`` times the coupling
matrix.  :func:`propagate_interval` is the literal stepping loop and is what
the oracle module uses.
"""
from dataclasses import dataclass, field
from functools import lru_cache
import math

import numpy as np

from .spin import build_operators, coherent_x_state

# Dormand-Prince 5(4): only the 5th-order solution is used
_RK_A = np.array([
    [0, 0, 0, 0, 0, 0],
    [1 / 5, 0, 0, 0, 0, 0],
    [3 / 40, 9 / 40, 0, 0, 0, 0],
    [44 / 45, -56 / 15, 32 / 9, 0, 0, 0],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0, 0],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0],
])
_RK_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
RK_ORDER = 5


def _stability_coefficients():
    # R(z) = 1 + sum_k z^k b^T A^(k-1) 1 for an explicit tableau
    coeffs = [1.0]
    v = np.ones(len(_RK_B))
    for _ in range(len(_RK_B)):
        coeffs.append(float(_RK_B @ v))
        v = _RK_A @ v
    return np.array(coeffs)


RK_STABILITY = _stability_coefficients()

DEFAULT_SAMPLES_PER_INTERVAL = 8
MIN_SUBSTEPS = 16


@dataclass(frozen=True)
class ProblemSpec:
    """Physical instance of the twist-and-turn problem."""

    n_spins: int
    chi: float
    omega: float = 0.0
    t_final: float = 1.0
    u_max: float | None = None

    def __post_init__(self):
        if int(self.n_spins) != self.n_spins or self.n_spins < 1:
            raise ValueError(f"n_spins must be a positive integer, got {self.n_spins!r}")
        for name in ("chi", "omega", "t_final"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.t_final <= 0:
            raise ValueError(f"t_final must be positive, got {self.t_final}")
        if self.u_max is not None and not (self.u_max > 0 and math.isfinite(self.u_max)):
            raise ValueError(f"u_max must be a positive finite number, got {self.u_max}")

    @property
    def dim(self):
        return int(self.n_spins) + 1

    def with_omega(self, omega):
        return ProblemSpec(self.n_spins, self.chi, omega, self.t_final, self.u_max)


@dataclass(frozen=True)
class ControlProtocol:
    """Piecewise-constant control on equal intervals of [0, t_final]."""

    values: np.ndarray
    t_final: float = 1.0

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        if values.size < 1:
            raise ValueError("control needs at least one interval")
        if not (self.t_final > 0):
            raise ValueError("t_final must be positive")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def n_intervals(self):
        return self.values.size

    @property
    def dt(self):
        return self.t_final / self.n_intervals

    @property
    def edges(self):
        return np.linspace(0.0, self.t_final, self.n_intervals + 1)

    @classmethod
    def constant(cls, value, n_intervals, t_final=1.0):
        return cls(np.full(n_intervals, float(value)), t_final)


@dataclass(frozen=True)
class AugmentedState:
    psi0: np.ndarray
    psi1: np.ndarray


@dataclass(frozen=True)
class CostatePair:
    pi0: np.ndarray
    pi1: np.ndarray


@dataclass(frozen=True)
class SampledTrajectory:
    """Samples of a two-block trajectory on a uniform grid.

    ``first``/``second`` hold (psi0, psi1) for forward trajectories and
    (pi0, pi1) for costate trajectories, shape (n_samples, dim).
    """

    times: np.ndarray
    first: np.ndarray
    second: np.ndarray
    samples_per_interval: int
    n_substeps: int
    kind: str = field(default="state")

    @property
    def n_samples(self):
        return self.times.size

    def state(self, k):
        if self.kind == "state":
            return AugmentedState(self.first[k], self.second[k])
        return CostatePair(self.first[k], self.second[k])

    @property
    def initial(self):
        return self.state(0)

    @property
    def final(self):
        return self.state(-1)

    def interval_of_samples(self):
        """Control-interval index of each sample (left-closed intervals)."""
        k = np.arange(self.n_samples) // self.samples_per_interval
        return np.minimum(k, (self.n_samples - 1) // self.samples_per_interval - 1)


def default_initial_state(n_spins):
    psi0 = coherent_x_state(n_spins)
    return AugmentedState(psi0, np.zeros_like(psi0))


def default_substeps(spec, control, samples_per_interval=DEFAULT_SAMPLES_PER_INTERVAL):
    """Substeps per interval: step <= 0.002 / (1 + N|chi|), at least 16, a multiple of K."""
    h_max = 0.002 / (1.0 + spec.n_spins * abs(spec.chi))
    n = max(MIN_SUBSTEPS, math.ceil(control.dt / h_max - 1e-9))
    k = samples_per_interval
    return k * math.ceil(n / k)


def hamiltonian(spec, control_value):
    ops = build_operators(spec.n_spins)
    return spec.chi * ops.jz2 + spec.omega * ops.jz + control_value * ops.jx


# -- literal RK5 stepping ----------------------------------------------------

def rk5_step(generator, x, h):
    """One explicit RK5 step of x' = G x (x may be a vector or a matrix of columns)."""
    stages = []
    for i in range(len(_RK_B)):
        xi = x
        for j in range(i):
            if _RK_A[i, j] != 0.0:
                xi = xi + (h * _RK_A[i, j]) * stages[j]
        stages.append(generator @ xi)
    out = x
    for bj, kj in zip(_RK_B, stages):
        if bj != 0.0:
            out = out + (h * bj) * kj
    return out


def rk5_default_substeps(generator, dt):
    scale = np.linalg.norm(generator, 2) * dt
    return max(MIN_SUBSTEPS, math.ceil(scale / 0.01))


def propagate_interval(generator, state, dt, n_substeps=None):
    """Apply ``n_substeps`` RK5 steps of x' = G x over a duration ``dt``."""
    generator = np.asarray(generator)
    state = np.asarray(state)
    if not (np.all(np.isfinite(generator)) and np.all(np.isfinite(state))):
        raise FloatingPointError("non-finite entries in generator or state")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if n_substeps is None:
        n_substeps = rk5_default_substeps(generator, dt)
    if n_substeps < 1:
        raise ValueError("n_substeps must be >= 1")
    h = dt / n_substeps
    x = state.astype(complex)
    for _ in range(n_substeps):
        x = rk5_step(generator, x, h)
    return x


def rk5_step_matrix(generator, h):
    """Matrix of a single RK5 step, obtained by stepping the identity."""
    generator = np.asarray(generator)
    return rk5_step(generator, np.eye(generator.shape[0], dtype=complex), h)


# -- spectral evaluation of R(hG)^n ------------------------------------------

@lru_cache(maxsize=32)
def _parity_basis(n_spins):
    """Orthonormal bases (d x d_even, d x d_odd) of the m -> -m reflection sectors."""
    d = n_spins + 1
    half = d // 2
    even = np.zeros((d, d - half))
    odd = np.zeros((d, half))
    s = 1.0 / math.sqrt(2.0)
    for i in range(half):
        even[i, i] = even[d - 1 - i, i] = s
        odd[i, i] = s
        odd[d - 1 - i, i] = -s
    if d % 2:
        even[half, half] = 1.0
    return even, odd


_EIG_CACHE = {}
_EIG_CACHE_SIZE = 4096


def _block_eigs(n_spins, chi, omega, values, basis, tag):
    """Eigendecompositions of basis^T H(value) basis for every value (cached)."""
    ops = build_operators(n_spins)
    m = ops.m
    keys = [(n_spins, chi, omega, float(v), tag) for v in values]
    found = {k: _EIG_CACHE[k] for k in keys if k in _EIG_CACHE}
    missing = sorted({k for k in keys if k not in found}, key=lambda k: k[3])
    if missing:
        h0 = np.diag(chi * m**2 + omega * m)
        h1 = ops.jx
        if basis is not None:
            h0 = basis.T @ h0 @ basis
            h1 = basis.T @ h1 @ basis
        stack = h0[None] + np.array([k[3] for k in missing])[:, None, None] * h1[None]
        e, v = np.linalg.eigh(stack)
        if len(_EIG_CACHE) + len(missing) > _EIG_CACHE_SIZE:
            _EIG_CACHE.clear()
        for i, k in enumerate(missing):
            found[k] = _EIG_CACHE[k] = (e[i], v[i])
    e = np.stack([found[k][0] for k in keys])
    v = np.stack([found[k][1] for k in keys])
    return e, v


def _poly(coeffs, z):
    out = np.zeros_like(z) + coeffs[-1]
    for c in coeffs[-2::-1]:
        out = out * z + c
    return out


def _poly_divided_difference(coeffs, za, zb):
    """R[za_j, zb_k] for polynomial R, batched; exact at coincident points.

    R[x, y] = sum_l y^l Q_l(x) with Q_l(x) = sum_{k>l} c_k x^(k-1-l).
    """
    deg = len(coeffs) - 1
    q = np.empty(za.shape + (deg,), dtype=complex)
    q[..., deg - 1] = coeffs[deg]
    for l in range(deg - 2, -1, -1):
        q[..., l] = za * q[..., l + 1] + coeffs[l + 1]
    ypow = zb[..., None, :] ** np.arange(deg)[:, None]
    return q @ ypow


def _log1p(rho):
    """Complex log(1 + rho), accurate for small rho (numpy's complex log1p is not)."""
    x, y = rho.real, rho.imag
    return 0.5 * np.log1p(x * (2.0 + x) + y * y) + 1j * np.arctan2(y, 1.0 + x)


def _power_divided_difference(za, zb, p):
    """Divided differences of F(z) = R(z)^p between za_j and zb_k, batched.

    With ratio = R[za, zb] / R(zb) and rho = (za - zb) * ratio = R(za)/R(zb) - 1,
    F[za, zb] = F(zb) * ratio * expm1(p log(1 + rho)) / rho, whose limit at
    rho = 0 is F(zb) * ratio * p.
    """
    rb = _poly(RK_STABILITY, zb)[..., None, :]
    ratio = _poly_divided_difference(RK_STABILITY, za, zb) / rb
    rho = (za[..., :, None] - zb[..., None, :]) * ratio
    zero = rho == 0
    growth = np.expm1(p * _log1p(rho)) / np.where(zero, 1.0, rho)
    if zero.any():
        growth[zero] = p
    return rb**p * ratio * growth


class _Propagators:
    """R(hG)^p for every control interval, in per-interval eigencoordinates.

    ``w[i]`` maps eigencoordinates to the z-basis, ``f[i]`` is the diagonal
    block and ``coupling[i]`` the psi0 -> psi1 block of the forward step.
    The backward (costate) step with -h uses the complex conjugates.
    """

    def __init__(self, spec, values, h, p):
        n_spins = int(spec.n_spins)
        chi, omega = float(spec.chi), float(spec.omega)
        jz = build_operators(n_spins).jz
        if omega == 0.0:
            # H commutes with m -> -m while J_z flips parity: H is block diagonal
            even, odd = _parity_basis(n_spins)
            e_even, v_even = _block_eigs(n_spins, chi, omega, values, even, "even")
            e_odd, v_odd = _block_eigs(n_spins, chi, omega, values, odd, "odd")
            n_even = even.shape[1]
            self.w = np.concatenate([even @ v_even, odd @ v_odd], axis=2)
            e = np.concatenate([e_even, e_odd], axis=1)
            z_even, z_odd = -1j * h * e_even, -1j * h * e_odd
            jz_oe = odd.T @ jz @ even
            block = np.swapaxes(v_odd, 1, 2) @ jz_oe @ v_even
            block = (-1j * h) * block * _power_divided_difference(z_odd, z_even, p)
            self.coupling = np.zeros(e.shape + (e.shape[1],), dtype=complex)
            self.coupling[:, n_even:, :n_even] = block
            self.coupling[:, :n_even, n_even:] = np.swapaxes(block, 1, 2)
        else:
            e, v = _block_eigs(n_spins, chi, omega, values, None, "full")
            self.w = v
            z = -1j * h * e
            zmat = np.swapaxes(v, 1, 2) @ jz @ v
            self.coupling = (-1j * h) * zmat * _power_divided_difference(z, z, p)
        self.f = _poly(RK_STABILITY, -1j * h * e) ** p


_PROP_CACHE = {}


def _propagators(spec, control, n_sub, p):
    key = (spec.n_spins, spec.chi, spec.omega, control.values.tobytes(), control.dt, n_sub, p)
    prop = _PROP_CACHE.get(key)
    if prop is None:
        if len(_PROP_CACHE) >= 4:
            _PROP_CACHE.pop(next(iter(_PROP_CACHE)))
        prop = _PROP_CACHE[key] = _Propagators(spec, control.values, control.dt / n_sub, p)
    return prop


def _check_inputs(spec, control, first, second):
    if not np.isclose(control.t_final, spec.t_final, rtol=1e-12, atol=0):
        raise ValueError("control.t_final does not match spec.t_final")
    if not np.all(np.isfinite(control.values)):
        raise ValueError("control values must be finite")
    for name, x in (("first block", first), ("second block", second)):
        if x.shape != (spec.dim,):
            raise ValueError(f"{name} has shape {x.shape}, expected ({spec.dim},)")


def _resolve_steps(spec, control, samples_per_interval, n_substeps):
    if samples_per_interval < 1:
        raise ValueError("samples_per_interval must be >= 1")
    if n_substeps is None:
        n_substeps = default_substeps(spec, control, samples_per_interval)
    if n_substeps < 1 or n_substeps % samples_per_interval:
        raise ValueError(
            f"n_substeps ({n_substeps}) must be a positive multiple of "
            f"samples_per_interval ({samples_per_interval})")
    return n_substeps


def evolve_forward(spec, control, init=None, samples_per_interval=DEFAULT_SAMPLES_PER_INTERVAL,
                   n_substeps=None):
    """Integrate (psi0, psi1) from t=0 to T, sampling K points per interval."""
    if init is None:
        init = default_initial_state(spec.n_spins)
    psi0 = np.asarray(init.psi0, dtype=complex)
    psi1 = np.asarray(init.psi1, dtype=complex)
    _check_inputs(spec, control, psi0, psi1)
    k = samples_per_interval
    n_sub = _resolve_steps(spec, control, k, n_substeps)
    n_t = control.n_intervals
    prop = _propagators(spec, control, n_sub, n_sub // k)

    first = np.empty((k * n_t + 1, spec.dim), dtype=complex)
    second = np.empty_like(first)
    first[0], second[0] = psi0, psi1
    for i in range(n_t):
        w, f, coupling = prop.w[i], prop.f[i], prop.coupling[i]
        c0 = w.T @ psi0
        c1 = w.T @ psi1
        coords0 = np.empty((k, spec.dim), dtype=complex)
        coords1 = np.empty_like(coords0)
        for s in range(k):
            c1 = f * c1 + coupling @ c0
            c0 = f * c0
            coords0[s], coords1[s] = c0, c1
        first[i * k + 1:(i + 1) * k + 1] = coords0 @ w.T
        second[i * k + 1:(i + 1) * k + 1] = coords1 @ w.T
        psi0, psi1 = first[(i + 1) * k], second[(i + 1) * k]
    times = np.linspace(0.0, spec.t_final, k * n_t + 1)
    return SampledTrajectory(times, first, second, k, n_sub, kind="state")


def final_state(spec, control, init=None, samples_per_interval=DEFAULT_SAMPLES_PER_INTERVAL,
                n_substeps=None):
    """Terminal augmented state only, with the same stepping as evolve_forward."""
    if init is None:
        init = default_initial_state(spec.n_spins)
    psi0 = np.asarray(init.psi0, dtype=complex)
    psi1 = np.asarray(init.psi1, dtype=complex)
    _check_inputs(spec, control, psi0, psi1)
    k = samples_per_interval
    n_sub = _resolve_steps(spec, control, k, n_substeps)
    prop = _propagators(spec, control, n_sub, n_sub // k)
    for w, f, coupling in zip(prop.w, prop.f, prop.coupling):
        c0 = w.T @ psi0
        c1 = w.T @ psi1
        for _ in range(k):
            c1 = f * c1 + coupling @ c0
            c0 = f * c0
        psi0, psi1 = w @ c0, w @ c1
    return AugmentedState(psi0, psi1)


def evolve_costate_backward(spec, control, terminal,
                            samples_per_interval=DEFAULT_SAMPLES_PER_INTERVAL, n_substeps=None):
    """Integrate (pi0, pi1) backward from t=T to 0 on the forward sample grid."""
    pi0 = np.asarray(terminal.pi0, dtype=complex)
    pi1 = np.asarray(terminal.pi1, dtype=complex)
    _check_inputs(spec, control, pi0, pi1)
    k = samples_per_interval
    n_sub = _resolve_steps(spec, control, k, n_substeps)
    n_t = control.n_intervals
    prop = _propagators(spec, control, n_sub, n_sub // k)

    first = np.empty((k * n_t + 1, spec.dim), dtype=complex)
    second = np.empty_like(first)
    first[-1], second[-1] = pi0, pi1
    for i in range(n_t - 1, -1, -1):
        # stepping with -h: conjugate diagonal, conjugate coupling in the upper block
        w, f, coupling = prop.w[i], prop.f[i].conj(), prop.coupling[i].conj()
        c0 = w.T @ pi0
        c1 = w.T @ pi1
        coords0 = np.empty((k, spec.dim), dtype=complex)
        coords1 = np.empty_like(coords0)
        for s in range(k - 1, -1, -1):
            c0 = f * c0 + coupling @ c1
            c1 = f * c1
            coords0[s], coords1[s] = c0, c1
        first[i * k:(i + 1) * k] = coords0 @ w.T
        second[i * k:(i + 1) * k] = coords1 @ w.T
        pi0, pi1 = first[i * k], second[i * k]
    times = np.linspace(0.0, spec.t_final, k * n_t + 1)
    return SampledTrajectory(times, first, second, k, n_sub, kind="costate")


def augmented_generator(spec, control_value, costate=False):
    """Dense 2d x 2d generator of the forward (or costate) dynamics."""
    ops = build_operators(spec.n_spins)
    a = -1j * hamiltonian(spec, control_value)
    b = -1j * ops.jz
    zero = np.zeros_like(a)
    if costate:
        return np.block([[a, b], [zero, a]])
    return np.block([[a, zero], [b, a]])
