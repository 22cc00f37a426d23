"""Collective spin operators in the J_z eigenbasis.

States are indexed by the magnetic quantum number m running from +N/2
down to -N/2, so index 0 is the fully polarised |+N/2> state.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import gammaln


@dataclass(frozen=True)
class SpinOperators:
    n_spins: int
    jx: np.ndarray
    jz: np.ndarray
    jz2: np.ndarray

    @property
    def dim(self):
        return self.n_spins + 1

    @property
    def m(self):
        """Diagonal of J_z (descending m values)."""
        return np.diag(self.jz).copy()

    @property
    def jx_offdiag(self):
        """First off-diagonal of J_x (length dim - 1)."""
        return np.diag(self.jx, 1).copy()

    @property
    def jy(self):
        jp = _raising(self.n_spins)
        return (jp - jp.T) / 2j


@dataclass(frozen=True)
class Eigensystem:
    """J_x eigendecomposition; row r of ``u`` has eigenvalue ``eigenvalues[r]``."""

    u: np.ndarray
    eigenvalues: np.ndarray


def _check_n(n_spins):
    if int(n_spins) != n_spins or n_spins < 1:
        raise ValueError(f"n_spins must be a positive integer, got {n_spins!r}")
    return int(n_spins)


def m_values(n_spins):
    n_spins = _check_n(n_spins)
    return n_spins / 2.0 - np.arange(n_spins + 1, dtype=float)


def _raising(n_spins):
    # <m+1|J+|m> = sqrt(J(J+1) - m(m+1)); in descending order J+ sits above the diagonal
    j = n_spins / 2.0
    m = m_values(n_spins)
    jp = np.zeros((n_spins + 1, n_spins + 1))
    lower = m[1:]
    jp[np.arange(n_spins), np.arange(1, n_spins + 1)] = np.sqrt(j * (j + 1) - lower * (lower + 1))
    return jp


@lru_cache(maxsize=64)
def _cached_operators(n_spins):
    m = m_values(n_spins)
    jp = _raising(n_spins)
    jx = (jp + jp.T) / 2.0
    ops = SpinOperators(n_spins=n_spins, jx=jx, jz=np.diag(m), jz2=np.diag(m**2))
    for arr in (ops.jx, ops.jz, ops.jz2):
        arr.flags.writeable = False
    return ops


def build_operators(n_spins):
    """Return J_x, J_z and J_z^2 for N spins (collective spin J = N/2)."""
    return _cached_operators(_check_n(n_spins))


def coherent_x_state(n_spins):
    """Top J_x eigenstate |J, m_x = J>, all amplitudes real and positive.

    Uses the closed form sqrt(C(N, k) / 2^N) for the amplitude on
    m = N/2 - k, which is the product state of N spins along +x.
    """
    n_spins = _check_n(n_spins)
    k = np.arange(n_spins + 1)
    log_amp = 0.5 * (gammaln(n_spins + 1) - gammaln(k + 1) - gammaln(n_spins - k + 1)
                     - n_spins * np.log(2.0))
    psi = np.exp(log_amp).astype(complex)
    return psi / np.linalg.norm(psi)


def hl_state(n_spins):
    """(|+N/2> + |-N/2>) / sqrt(2), the Heisenberg-limit (GHZ-like) state."""
    n_spins = _check_n(n_spins)
    psi = np.zeros(n_spins + 1, dtype=complex)
    psi[0] = psi[-1] = 1.0 / np.sqrt(2.0)
    return psi


def _fix_row_signs(u, rel_tol=1e-8):
    # tiny leading entries carry no reliable sign, so key on the first "substantial" one
    for row in u:
        scale = np.max(np.abs(row))
        idx = np.flatnonzero(np.abs(row) > rel_tol * scale)[0]
        if row[idx] < 0:
            row *= -1.0
    return u


@lru_cache(maxsize=64)
def _cached_eigensystem(n_spins):
    ops = build_operators(n_spins)
    w, v = eigh_tridiagonal(np.zeros(ops.dim), ops.jx_offdiag)
    order = np.argsort(w)[::-1]
    u = _fix_row_signs(v[:, order].T.copy())
    eig = Eigensystem(u=u, eigenvalues=w[order])
    u.flags.writeable = False
    eig.eigenvalues.flags.writeable = False
    return eig


def jx_eigensystem(n_spins):
    """Full J_x eigensystem sorted by descending eigenvalue."""
    return _cached_eigensystem(_check_n(n_spins))
