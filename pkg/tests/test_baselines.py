import numpy as np
import pytest

from emdm import rng as streams
from emdm.analytic import gaussian_posterior
from emdm.baselines import LmmseModel, lmmse_estimate, lmmse_fit, rls_estimate
from emdm.bench import nmse, nmse_db
from emdm.errors import InsufficientData, SingularSystem
from emdm.linalg import sym_eig
from emdm.measurement import (EstimationProblem, build_operator, gen_pilots,
                              synthesize)


def identity_problem(y, sigma2):
    n = y.shape[0]
    a = np.eye(n)
    return EstimationProblem(a=a, y=y, sigma2=sigma2, gram_eig=sym_eig(a),
                             n_p=1, n_t=1, n_r=1)


class TestRls:
    def test_identity_noiseless(self, rng):
        y = rng.standard_normal(4)
        assert np.max(np.abs(rls_estimate(identity_problem(y, 0.0)) - y)) < 1e-12

    def test_identity_unit_noise(self, rng):
        y = rng.standard_normal(4)
        assert np.max(np.abs(rls_estimate(identity_problem(y, 1.0)) - y / 2)) < 1e-12

    def test_underdetermined_matches_dense_oracle(self, rng):
        a = rng.standard_normal((6, 8))
        y = rng.standard_normal(6)
        sigma2 = 0.3
        prob = EstimationProblem(a=a, y=y, sigma2=sigma2,
                                 gram_eig=sym_eig(a @ a.T), n_p=1, n_t=1, n_r=1)
        got = rls_estimate(prob)
        oracle = np.linalg.solve(a.T @ a + sigma2 * np.eye(8), a.T @ y)
        assert np.linalg.norm(got - oracle) / np.linalg.norm(oracle) < 1e-9

    def test_singular_system(self, rng):
        a = np.zeros((3, 5))
        prob = EstimationProblem(a=a, y=np.zeros(3), sigma2=0.0,
                                 gram_eig=sym_eig(a @ a.T), n_p=1, n_t=1, n_r=1)
        with pytest.raises(SingularSystem):
            rls_estimate(prob)

    def test_linearity(self, rng):
        a = rng.standard_normal((5, 7))
        sigma2 = 0.2
        ge = sym_eig(a @ a.T)
        y1 = rng.standard_normal(5)
        y2 = rng.standard_normal(5)
        p = lambda y: EstimationProblem(a=a, y=y, sigma2=sigma2, gram_eig=ge,
                                        n_p=1, n_t=1, n_r=1)
        lhs = rls_estimate(p(2.0 * y1 + 3.0 * y2))
        rhs = 2.0 * rls_estimate(p(y1)) + 3.0 * rls_estimate(p(y2))
        assert np.max(np.abs(lhs - rhs)) < 1e-10


class TestLmmseFit:
    def test_symmetric_pair(self):
        v = np.array([1.0, -2.0, 0.5])
        model = lmmse_fit(np.stack([v, -v]))
        assert np.array_equal(model.mean, np.zeros(3))
        assert np.max(np.abs(model.cov - np.outer(v, v))) < 1e-15

    def test_iid_standard_normal(self):
        x = streams.derive_rng(0, 1).standard_normal((10_000, 8))
        model = lmmse_fit(x)
        assert np.max(np.abs(model.cov - np.eye(8))) < 0.1

    def test_repeated_sample_zero_covariance(self):
        v = np.array([2.0, 3.0])
        model = lmmse_fit(np.stack([v, v]))
        assert np.max(np.abs(model.cov)) < 1e-15

    def test_insufficient_data(self):
        with pytest.raises(InsufficientData):
            lmmse_fit(np.ones((1, 4)))

    def test_ridge(self):
        v = np.array([1.0, 0.0])
        model = lmmse_fit(np.stack([v, -v]), ridge=0.5)
        assert model.cov[1, 1] == 0.5


class TestLmmseEstimate:
    def test_push_through_identity_matches_rls(self, rng):
        # C = I, mean = 0: A^T (A A^T + s I)^-1 = (A^T A + s I)^-1 A^T
        a = rng.standard_normal((6, 10))
        y = rng.standard_normal(6)
        sigma2 = 0.4
        prob = EstimationProblem(a=a, y=y, sigma2=sigma2,
                                 gram_eig=sym_eig(a @ a.T), n_p=1, n_t=1, n_r=1)
        model = LmmseModel(mean=np.zeros(10), cov=np.eye(10))
        assert np.max(np.abs(lmmse_estimate(model, prob)
                             - rls_estimate(prob))) < 1e-8

    def test_huge_noise_returns_mean(self, rng):
        a = rng.standard_normal((4, 6))
        mean = rng.standard_normal(6)
        model = LmmseModel(mean=mean, cov=np.eye(6))
        prob = EstimationProblem(a=a, y=rng.standard_normal(4), sigma2=1e12,
                                 gram_eig=sym_eig(a @ a.T), n_p=1, n_t=1, n_r=1)
        got = lmmse_estimate(model, prob)
        assert np.linalg.norm(got - mean) / np.linalg.norm(mean) < 1e-4

    def test_conjugate_gaussian_oracle(self, rng):
        n, m = 8, 5
        idx = np.arange(n)
        cov = np.exp(-(idx[:, None] - idx[None, :]) ** 2 / 6.0) + 0.1 * np.eye(n)
        a = rng.standard_normal((m, n))
        y = rng.standard_normal(m)
        sigma2 = 0.5
        prob = EstimationProblem(a=a, y=y, sigma2=sigma2,
                                 gram_eig=sym_eig(a @ a.T), n_p=1, n_t=1, n_r=1)
        model = LmmseModel(mean=np.zeros(n), cov=cov)
        got = lmmse_estimate(model, prob)
        oracle_mean, _ = gaussian_posterior(a, y, sigma2, np.zeros(n), cov)
        assert np.max(np.abs(got - oracle_mean)) < 1e-9

    def test_affine_in_observation(self, rng):
        a = rng.standard_normal((5, 7))
        mean = rng.standard_normal(7)
        cov = np.eye(7) * 0.8
        model = LmmseModel(mean=mean, cov=cov)
        ge = sym_eig(a @ cov @ a.T)
        mk = lambda y: EstimationProblem(a=a, y=y, sigma2=0.3, gram_eig=ge,
                                         n_p=1, n_t=1, n_r=1)
        y1, y2 = rng.standard_normal(5), rng.standard_normal(5)
        w = 0.3
        lhs = lmmse_estimate(model, mk(w * y1 + (1 - w) * y2))
        rhs = (w * lmmse_estimate(model, mk(y1))
               + (1 - w) * lmmse_estimate(model, mk(y2)))
        assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_true_statistics_lmmse_dominates(rng):
    # on Gaussian channels the true-covariance LMMSE is Bayes optimal:
    # nobody in the linear suite beats it by more than 0.1 dB at 10 dB SNR
    n_t, n_r, n_p = 4, 2, 3
    n = 2 * n_r * n_t
    idx = np.arange(n)
    cov = 0.6 * np.eye(n) + 0.4 * np.exp(-(idx[:, None] - idx[None, :]) ** 2 / 8.0)
    chol = np.linalg.cholesky(cov)
    sigma2 = n_t / (2.0 * 10.0)
    fit_data = (chol @ streams.derive_rng(1, 2).standard_normal((n, 300))).T
    sample_model = lmmse_fit(fit_data)
    true_model = LmmseModel(mean=np.zeros(n), cov=cov)
    res = {"rls": [], "lmmse_true": [], "lmmse_sample": []}
    for trial in range(200):
        seed = streams.derive_seed(55, trial)
        h = chol @ streams.derive_rng(seed, 7).standard_normal(n)
        pil = gen_pilots(n_t, n_p, seed)
        a = build_operator(pil, n_r)
        prob = synthesize(h, a, sigma2, streams.derive_rng(seed, streams.NOISE),
                          n_p, n_t, n_r)
        res["rls"].append(nmse(rls_estimate(prob), h))
        res["lmmse_true"].append(nmse(lmmse_estimate(true_model, prob), h))
        res["lmmse_sample"].append(nmse(lmmse_estimate(sample_model, prob), h))
    best = nmse_db(np.mean(res["lmmse_true"]))
    for other in ("rls", "lmmse_sample"):
        assert best <= nmse_db(np.mean(res[other])) + 0.1
