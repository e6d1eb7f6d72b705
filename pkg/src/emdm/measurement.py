"""Pilot measurement model: QPSK pilots, the real-embedded angular-domain
operator A, SNR bookkeeping, and observation synthesis.

The complex model Y = H P + N is vectorized (column-stacking) to
y_c = (P^T kron I) vec(H), moved to the angular domain, and embedded into
reals as A = [[Re, -Im], [Im, Re]], of size 2*n_rx*n_p x 2*n_rx*n_tx.
"""

from dataclasses import dataclass

import numpy as np

from . import rng as streams
from .errors import DimensionMismatch, InvalidRange
from .linalg import SymEig, dft_matrix, kron, sym_eig

_QPSK = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / np.sqrt(2.0)


@dataclass(frozen=True)
class PilotMatrix:
    p: np.ndarray   # complex (n_tx, n_p), unit-modulus QPSK entries
    seed: int


@dataclass(frozen=True)
class EstimationProblem:
    """The {y, A, sigma^2} triplet plus the spectral factorization of A A^T."""

    a: np.ndarray
    y: np.ndarray
    sigma2: float
    gram_eig: SymEig
    n_p: int
    n_t: int
    n_r: int


def gen_pilots(n_t, n_p, seed):
    """i.i.d. uniform unit-power QPSK pilot matrix from the pilot stream."""
    if n_t < 1 or n_p < 1:
        raise InvalidRange("pilot dimensions must be >= 1")
    rng = streams.derive_rng(seed, streams.PILOT)
    idx = rng.integers(0, 4, size=(n_t, n_p))
    return PilotMatrix(p=_QPSK[idx], seed=int(seed))


def real_embed(m):
    """[[Re, -Im], [Im, Re]] block embedding of a complex matrix."""
    return np.block([[m.real, -m.imag], [m.imag, m.real]])


def build_operator(pilots, n_r):
    """Real-valued angular-domain measurement matrix A.

    Uses the mixed-product identity (P^T kron I)(F_T^H kron F_R)
    = (P^T F_T^H) kron F_R rather than forming either factor.
    """
    p = pilots.p
    n_t = p.shape[0]
    f_t = dft_matrix(n_t)
    f_r = dft_matrix(n_r)
    a_ad = kron(p.T @ f_t.conj().T, f_r)
    return real_embed(a_ad)


def sigma2_from_snr(snr_db, n_t):
    """Per-real-dimension noise variance from SNR = n_t / (2 sigma^2)."""
    if not np.isfinite(snr_db):
        raise InvalidRange("snr_db must be finite")
    return n_t / (2.0 * 10.0 ** (snr_db / 10.0))


def make_problem(a, y, sigma2, n_p, n_t, n_r):
    """Assemble an EstimationProblem, factorizing A A^T once."""
    m, n = a.shape
    if m != 2 * n_r * n_p or n != 2 * n_r * n_t:
        raise DimensionMismatch(f"operator {a.shape} inconsistent with counts")
    if y.shape != (m,):
        raise DimensionMismatch(f"observation length {y.shape} != {m}")
    return EstimationProblem(a=a, y=y, sigma2=float(sigma2),
                             gram_eig=sym_eig(a @ a.T),
                             n_p=n_p, n_t=n_t, n_r=n_r)


def synthesize(h_angular_real, a, sigma2, rng, n_p, n_t, n_r):
    """Observe y = A h + n with i.i.d. N(0, sigma^2) noise per real dim."""
    if a.shape[1] != h_angular_real.shape[0]:
        raise DimensionMismatch("operator and channel dimensions disagree")
    y = a @ h_angular_real
    if sigma2 > 0:
        y = y + np.sqrt(sigma2) * rng.standard_normal(a.shape[0])
    return make_problem(a, y, sigma2, n_p, n_t, n_r)
