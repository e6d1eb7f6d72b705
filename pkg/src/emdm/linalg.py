"""Dense real/complex linear algebra primitives shared by every module.

Matrices are plain numpy arrays (float64 / complex128, row-major); the
vectorization convention is column-stacking throughout, which is what makes
vec(H P) = (P^T kron I) vec(H) hold.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DimensionMismatch, NonConvergence, SingularShift

_MAX_KRON_ENTRIES = 1 << 31


def kron(a, b):
    """Kronecker product; block (i, j) of the result is a[i, j] * b."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionMismatch("kron expects 2-D matrices")
    if a.shape[0] * b.shape[0] * a.shape[1] * b.shape[1] > _MAX_KRON_ENTRIES:
        raise DimensionMismatch("kron product size overflows the supported range")
    return np.kron(a, b)


def dft_matrix(n):
    """Unitary n x n DFT: entry (k, l) = exp(-2j*pi*k*l/n) / sqrt(n)."""
    if n < 1:
        raise DimensionMismatch("dft_matrix requires n >= 1")
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)


def vec(m):
    """Column-stacking vectorization."""
    return np.asarray(m).reshape(-1, order="F")


def unvec(v, rows, cols):
    """Inverse of vec for a rows x cols matrix."""
    return np.asarray(v).reshape(rows, cols, order="F")


@dataclass(frozen=True)
class SymEig:
    """Symmetric eigendecomposition, eigenvalues ascending, U orthonormal."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def sym_eig(m, max_sweeps=100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    The input is symmetrized as (M + M^T)/2 first; sweeps stop once the
    off-diagonal Frobenius norm falls below 1e-12 relative to the input
    scale. Raises NonConvergence after max_sweeps full sweeps.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch("sym_eig expects a square matrix")
    scale = max(1.0, float(np.abs(m).max())) if m.size else 1.0
    if m.size and float(np.abs(m - m.T).max()) > 1e-10 * scale:
        raise DimensionMismatch("sym_eig input is not symmetric")
    a = np.ascontiguousarray(0.5 * (m + m.T))
    v = np.eye(m.shape[0])
    tol = 1e-12 * max(1.0, float(np.linalg.norm(a)))
    sweeps = _kernels.jacobi_sweeps(a, v, tol, max_sweeps)
    if sweeps < 0:
        raise NonConvergence(f"Jacobi did not converge in {max_sweeps} sweeps")
    lam = np.diag(a).copy()
    order = np.argsort(lam, kind="stable")
    return SymEig(eigenvalues=lam[order], eigenvectors=np.ascontiguousarray(v[:, order]))


def spectral_solve(eig, shift_scale, rhs):
    """Apply (c*M + d*I)^{-1} to rhs given the eigendecomposition of M.

    shift_scale is the pair (c, d); every shifted eigenvalue c*lambda + d
    must stay positive or SingularShift is raised.
    """
    c, d = shift_scale
    w = c * eig.eigenvalues + d
    if np.min(w) <= 1e-14:
        raise SingularShift(f"shifted spectrum reaches {np.min(w):.3e}")
    u = eig.eigenvectors
    return u @ ((u.T @ rhs) / w)
