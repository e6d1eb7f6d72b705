"""Analytic Gaussian plug-ins used to validate the sampler and estimators
independently of any learned network.
"""

import numpy as np

from .errors import DimensionMismatch


class GaussianEnergy:
    """Stands in for a trained model: the implied log-prior at every step t
    is exactly log N(h; mean, cov) (up to a constant).

    The sampler divides both the energy and its gradient by
    sqrt(1 - alpha_bar_t), so this plug-in pre-multiplies by that factor;
    the chain at a fixed t then targets N(mean, cov) exactly.
    """

    def __init__(self, cov, schedule, mean=None):
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise DimensionMismatch("covariance must be square")
        self.cov = cov
        self.prec = np.linalg.inv(cov)
        self.mean = np.zeros(cov.shape[0]) if mean is None else np.asarray(mean)
        self.schedule = schedule

    def _scale(self, t):
        return np.sqrt(1.0 - self.schedule.alpha_bar[t])

    def energy(self, h, t):
        d = h - self.mean
        return float(self._scale(t) * 0.5 * (d @ self.prec @ d))

    def epsilon(self, h, t):
        return self._scale(t) * (self.prec @ (h - self.mean))

    def energy_and_epsilon(self, h, t):
        return self.energy(h, t), self.epsilon(h, t)


class AnnealedGaussianEnergy:
    """Exact energies for data h0 ~ N(0, C) under the forward diffusion:
    the level-t marginal is N(0, abar_t C + (1 - abar_t) I), so the implied
    log-prior at every step matches the true perturbed prior exactly. Used
    to validate the annealed sampler end to end without any learning.
    """

    def __init__(self, cov, schedule):
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise DimensionMismatch("covariance must be square")
        self.cov = cov
        self.schedule = schedule
        n = cov.shape[0]
        self.state_dim = n
        self._precs = {}
        for t in range(1, schedule.t_max + 1):
            ab = schedule.alpha_bar[t]
            self._precs[t] = np.linalg.inv(ab * cov + (1.0 - ab) * np.eye(n))

    def _scale(self, t):
        return np.sqrt(1.0 - self.schedule.alpha_bar[t])

    def energy(self, h, t):
        return float(self._scale(t) * 0.5 * (h @ self._precs[t] @ h))

    def epsilon(self, h, t):
        return self._scale(t) * (self._precs[t] @ h)

    def energy_and_epsilon(self, h, t):
        return self.energy(h, t), self.epsilon(h, t)


def gaussian_posterior(a, y, sigma2, prior_mean, prior_cov):
    """Exact posterior (mean, cov) of h ~ N(m, C) given y = A h + n,
    n ~ N(0, sigma2 I). Independent oracle path via dense solves."""
    a = np.asarray(a)
    c = np.asarray(prior_cov)
    m = np.asarray(prior_mean)
    gram = a @ c @ a.T + sigma2 * np.eye(a.shape[0])
    gain = c @ a.T @ np.linalg.inv(gram)
    mean = m + gain @ (y - a @ m)
    cov = c - gain @ a @ c
    return mean, cov
