import numpy as np
import pytest

from emdm import rng as streams
from emdm.channels import angular_to_real
from emdm.errors import DimensionMismatch
from emdm.linalg import dft_matrix, kron
from emdm.measurement import (build_operator, gen_pilots, make_problem,
                              real_embed, sigma2_from_snr, synthesize,
                              PilotMatrix)


class TestPilots:
    def test_unit_modulus_exact(self):
        p = gen_pilots(8, 6, seed=1)
        assert np.all(np.abs(p.p) == 1.0)

    def test_constellation(self):
        p = gen_pilots(16, 16, seed=2)
        allowed = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / np.sqrt(2.0)
        for v in p.p.ravel():
            assert np.min(np.abs(allowed - v)) < 1e-15

    def test_mean_modulus_small(self):
        p = gen_pilots(100, 100, seed=3)
        assert abs(p.p.mean()) < 0.05

    def test_seed_determinism(self):
        a = gen_pilots(4, 3, seed=7)
        b = gen_pilots(4, 3, seed=7)
        assert np.array_equal(a.p, b.p)
        assert a.seed == 7


class TestBuildOperator:
    def test_trivial_identity(self):
        # n_t = n_p = n_r = 1 with pilot 1+0j and DFT(1) = 1 gives A = I_2
        pil = PilotMatrix(p=np.array([[1.0 + 0j]]), seed=0)
        a = build_operator(pil, 1)
        assert np.max(np.abs(a - np.eye(2))) < 1e-15

    def test_real_embed_matches_complex_multiply(self, rng):
        n_t, n_p, n_r = 4, 3, 2
        pil = gen_pilots(n_t, n_p, seed=5)
        a = build_operator(pil, n_r)
        # complex path
        f_t, f_r = dft_matrix(n_t), dft_matrix(n_r)
        a_ad = kron(pil.p.T @ f_t.conj().T, f_r)
        h = rng.standard_normal(n_r * n_t) + 1j * rng.standard_normal(n_r * n_t)
        y_c = a_ad @ h
        y_r = a @ angular_to_real(h)
        assert np.max(np.abs(y_r - np.concatenate([y_c.real, y_c.imag]))) < 1e-12

    def test_matches_unfactored_construction(self, rng):
        # (P^T kron I)(F_T^H kron F_R) without the mixed-product shortcut
        n_t, n_p, n_r = 4, 2, 3
        pil = gen_pilots(n_t, n_p, seed=11)
        f_t, f_r = dft_matrix(n_t), dft_matrix(n_r)
        direct = kron(pil.p.T, np.eye(n_r)) @ kron(f_t.conj().T, f_r)
        assert np.max(np.abs(real_embed(direct) - build_operator(pil, n_r))) < 1e-12

    def test_scaled_unitary_pilots_flat_gram(self):
        # alpha = 1 with orthogonal pilot rows: eigenvalues of A A^T all n_t
        n_t = n_p = 4
        n_r = 2
        pil = PilotMatrix(p=dft_matrix(n_t) * np.sqrt(n_t), seed=0)
        a = build_operator(pil, n_r)
        eig = np.linalg.eigvalsh(a @ a.T)
        assert np.max(np.abs(eig - n_t)) < 1e-9

    def test_norm_preserved(self, rng):
        pil = gen_pilots(8, 5, seed=13)
        a = build_operator(pil, 4)
        f_t, f_r = dft_matrix(8), dft_matrix(4)
        a_ad = kron(pil.p.T @ f_t.conj().T, f_r)
        h = rng.standard_normal(32) + 1j * rng.standard_normal(32)
        assert abs(np.linalg.norm(a_ad @ h)
                   - np.linalg.norm(a @ angular_to_real(h))) < 1e-10

    def test_rank_underdetermined(self):
        n_t, n_p, n_r = 8, 5, 4
        pil = gen_pilots(n_t, n_p, seed=17)
        a = build_operator(pil, n_r)
        m, n = a.shape
        assert (m, n) == (2 * n_r * n_p, 2 * n_r * n_t)
        assert m < n
        eig = np.linalg.eigvalsh(a @ a.T)
        assert int(np.sum(eig > 1e-9)) == min(m, 2 * n_r * n_p)


class TestSigma2:
    def test_zero_db(self):
        assert sigma2_from_snr(0.0, 2) == 1.0

    def test_paper_scale_value(self):
        assert abs(sigma2_from_snr(15.0, 64) - 1.0119288512538813) < 1e-15

    def test_monotone_decreasing(self):
        vals = [sigma2_from_snr(db, 8) for db in (0.0, 10.0, 20.0, 30.0)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestSynthesize:
    def _setup(self, rng, sigma2, n_p=3, n_t=4, n_r=2):
        pil = gen_pilots(n_t, n_p, seed=23)
        a = build_operator(pil, n_r)
        h = rng.standard_normal(2 * n_r * n_t)
        prob = synthesize(h, a, sigma2, streams.derive_rng(5, streams.NOISE),
                          n_p, n_t, n_r)
        return a, h, prob

    def test_noiseless_exact(self, rng):
        a, h, prob = self._setup(rng, 0.0)
        assert np.array_equal(prob.y, a @ h)

    def test_noise_variance_montecarlo(self, rng):
        sigma2 = 0.3
        pil = gen_pilots(4, 3, seed=29)
        a = build_operator(pil, 2)
        h = rng.standard_normal(16)
        clean = a @ h
        sq = 0.0
        count = 0
        for i in range(500):
            prob = synthesize(h, a, sigma2, streams.derive_rng(i, streams.NOISE),
                              3, 4, 2)
            sq += np.sum((prob.y - clean) ** 2)
            count += prob.y.size
        assert abs(sq / count - sigma2) < 0.05 * sigma2

    def test_gram_eig_reconstruction(self, rng):
        a, h, prob = self._setup(rng, 0.1)
        gram = a @ a.T
        rec = (prob.gram_eig.eigenvectors
               @ np.diag(prob.gram_eig.eigenvalues)
               @ prob.gram_eig.eigenvectors.T)
        assert np.max(np.abs(rec - gram)) < 1e-8

    def test_dimension_check(self, rng):
        pil = gen_pilots(4, 3, seed=1)
        a = build_operator(pil, 2)
        with pytest.raises(DimensionMismatch):
            synthesize(rng.standard_normal(10), a, 0.1,
                       streams.derive_rng(0, 1), 3, 4, 2)
        with pytest.raises(DimensionMismatch):
            make_problem(a, np.zeros(a.shape[0]), 0.1, n_p=3, n_t=5, n_r=2)
