"""Linear reference estimators: regularized least squares and LMMSE built
from the training-split sample covariance.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InsufficientData, SingularShift, SingularSystem
from .linalg import spectral_solve, sym_eig


@dataclass(frozen=True)
class LmmseModel:
    """Mean and sample covariance of the real angular training channels."""

    mean: np.ndarray
    cov: np.ndarray


def rls_estimate(problem):
    """(A^T A + sigma^2 I)^{-1} A^T y via the symmetric factorization."""
    a, y = problem.a, problem.y
    try:
        eig = sym_eig(a.T @ a)
        return spectral_solve(eig, (1.0, problem.sigma2), a.T @ y)
    except SingularShift as exc:
        raise SingularSystem("A^T A + sigma^2 I is singular") from exc


def lmmse_fit(training_vectors, ridge=0.0):
    """Sample mean and covariance (1/K sum of outer products) of the
    training split; ridge adds eps*I for K < N situations."""
    x = np.asarray(training_vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InsufficientData("lmmse_fit needs at least 2 training samples")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = (centered.T @ centered) / x.shape[0]
    if ridge:
        cov = cov + ridge * np.eye(cov.shape[0])
    return LmmseModel(mean=mean, cov=cov)


def lmmse_estimate(model, problem):
    """mean + C A^T (A C A^T + sigma^2 I)^{-1} (y - A mean).

    (The textbook Gaussian-posterior-mean form; the inner matrix lives in
    observation space so the dimensions conform for any pilot density.)
    """
    a, y = problem.a, problem.y
    if model.cov.shape[0] != a.shape[1]:
        raise DimensionMismatch("covariance size does not match the operator")
    resid = y - a @ model.mean
    gram = a @ model.cov @ a.T
    try:
        eig = sym_eig(gram)
        solved = spectral_solve(eig, (1.0, problem.sigma2), resid)
    except SingularShift as exc:
        raise SingularSystem("A C A^T + sigma^2 I is singular") from exc
    return model.mean + model.cov @ (a.T @ solved)
