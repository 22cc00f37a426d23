"""Terminal costs (QFI, CFI, fidelity) and the matching costate boundary values.

Every cost ``C`` here is minimised, and its costate boundary is the
Wirtinger derivative ``pi = dC / d<psi|`` with respect to the conjugated
terminal amplitudes, so that ``dC = 2 Re(<pi0|dpsi0> + <pi1|dpsi1>)``.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from .dynamics import CostatePair
from .spin import Eigensystem, m_values

DEFAULT_CFI_EPS = 1e-10


@dataclass(frozen=True)
class QFI:
    name: str = field(default="qfi", init=False)


@dataclass(frozen=True)
class CFI:
    """Classical Fisher information of a J_x measurement after exp(i phase J_z)."""

    phase: float = 0.0
    eps: float = DEFAULT_CFI_EPS
    name: str = field(default="cfi", init=False)

    def __post_init__(self):
        if not math.isfinite(self.phase):
            raise ValueError("CFI phase must be finite")
        object.__setattr__(self, "phase", float(self.phase) % (2 * math.pi))

    def with_phase(self, phase):
        return CFI(phase, self.eps)


@dataclass(frozen=True)
class Fidelity:
    target: np.ndarray
    name: str = field(default="fidelity", init=False)

    def __post_init__(self):
        target = np.asarray(self.target, dtype=complex).reshape(-1)
        norm = np.linalg.norm(target)
        if not np.isclose(norm, 1.0, atol=1e-9):
            raise ValueError(f"fidelity target must be unit norm, got norm {norm}")
        object.__setattr__(self, "target", target)


@dataclass(frozen=True)
class MeasurementDistribution:
    p: np.ndarray
    dp_domega: np.ndarray


# -- QFI -----------------------------------------------------------------------

def qfi_cost(final):
    """C_Q = -(<psi1|psi1> - |<psi1|psi0>|^2); QFI = -4 C_Q."""
    psi0, psi1 = final.psi0, final.psi1
    return -(np.vdot(psi1, psi1).real - abs(np.vdot(psi1, psi0)) ** 2)


def qfi_value(final):
    return -4.0 * qfi_cost(final)


def qfi_costate_boundary(final):
    psi0, psi1 = final.psi0, final.psi1
    pi0 = psi1 * np.vdot(psi1, psi0)
    pi1 = -psi1 + psi0 * np.vdot(psi0, psi1)
    return CostatePair(pi0, pi1)


# -- CFI -----------------------------------------------------------------------

def _rotated_amplitudes(final, eig, phase):
    n_spins = eig.u.shape[0] - 1
    rot = np.exp(1j * phase * m_values(n_spins))
    alpha = eig.u @ (rot * final.psi0)
    beta = eig.u @ (rot * final.psi1)
    return rot, alpha, beta


def measurement_distribution(final, eig, phase):
    """Outcome probabilities of J_x after exp(i phase J_z), and their omega-derivative."""
    _, alpha, beta = _rotated_amplitudes(final, eig, phase)
    return MeasurementDistribution(np.abs(alpha) ** 2, 2.0 * (beta.conj() * alpha).real)


def cfi_value(dist, eps=DEFAULT_CFI_EPS):
    """Sum_m (dP_m)^2 / P_m with P_m clamped below at ``eps``."""
    return float(np.sum(dist.dp_domega**2 / np.maximum(dist.p, eps)))


def cfi_costate_boundary(final, eig, phase, eps=DEFAULT_CFI_EPS):
    """Costate boundary of C = -F_C and the phase derivative dF_C/dphase.

    Where P_m < eps the clamped term dP^2/eps has no P-dependence, so only
    the dP-derivative survives there.
    """
    rot, alpha, beta = _rotated_amplitudes(final, eig, phase)
    p = np.abs(alpha) ** 2
    dp = 2.0 * (beta.conj() * alpha).real
    unclamped = p >= eps
    denom = np.where(unclamped, p, eps)
    ratio = dp / denom

    w_alpha = np.where(unclamped, -ratio**2, 0.0) * alpha + 2.0 * ratio * beta
    w_beta = 2.0 * ratio * alpha
    grad0 = rot.conj() * (eig.u.T @ w_alpha)
    grad1 = rot.conj() * (eig.u.T @ w_beta)

    m = m_values(eig.u.shape[0] - 1)
    dalpha = eig.u @ (1j * m * rot * final.psi0)
    dbeta = eig.u @ (1j * m * rot * final.psi1)
    dp_dphi = 2.0 * (alpha.conj() * dalpha).real
    ddp_dphi = 2.0 * (dbeta.conj() * alpha + beta.conj() * dalpha).real
    df_dphi = float(np.sum(np.where(unclamped, -ratio**2, 0.0) * dp_dphi
                           + 2.0 * ratio * ddp_dphi))
    return CostatePair(-grad0, -grad1), df_dphi


# -- fidelity ------------------------------------------------------------------

def fidelity_value(psi0, target):
    return abs(np.vdot(target, psi0)) ** 2


def fidelity_costate_boundary(final, target):
    pi0 = -target * np.vdot(target, final.psi0)
    return CostatePair(pi0, np.zeros_like(final.psi1))


# -- dispatch ------------------------------------------------------------------

def terminal_cost(kind, final, eig=None):
    """Return (cost to minimise, user-facing objective) for a terminal state."""
    if isinstance(kind, QFI):
        c = qfi_cost(final)
        return c, -4.0 * c
    if isinstance(kind, CFI):
        f = cfi_value(measurement_distribution(final, _need(eig), kind.phase), kind.eps)
        return -f, f
    if isinstance(kind, Fidelity):
        f = fidelity_value(final.psi0, kind.target)
        return -f, f
    raise TypeError(f"unknown cost kind {kind!r}")


def costate_boundary(kind, final, eig=None):
    """Return (CostatePair, dF/dphase or None)."""
    if isinstance(kind, QFI):
        return qfi_costate_boundary(final), None
    if isinstance(kind, CFI):
        return cfi_costate_boundary(final, _need(eig), kind.phase, kind.eps)
    if isinstance(kind, Fidelity):
        return fidelity_costate_boundary(final, kind.target), None
    raise TypeError(f"unknown cost kind {kind!r}")


def _need(eig):
    if not isinstance(eig, Eigensystem):
        raise ValueError("CFI evaluation requires the J_x eigensystem")
    return eig

