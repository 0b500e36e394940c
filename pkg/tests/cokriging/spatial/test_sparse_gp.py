"""
Tests for Vecchia factors, conjugate gradients and Lanczos quadrature
"""

import unittest

import numpy as np
from scipy import linalg
from scipy.stats import multivariate_normal

from cokriging.errors import CokrigingError
from cokriging.spatial.covariance import KernelParams, SpaceTimeSites, cov_matrix
from cokriging.spatial.sparse_gp import (
    cg_solve,
    lanczos_quadform,
    lanczos_sqrt_sample,
    logdet_hutchinson,
    order_sites,
    vecchia_factor,
    vecchia_structure,
)


def spd_matrix(dim, low, high, seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return (q * rng.uniform(low, high, dim)) @ q.T


class TestVecchia(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(11)
        self.sites = SpaceTimeSites(rng.random((25, 2)), rng.random(25) * 30, "euclidean")
        self.params = KernelParams(variance=1.3, range_x=0.3, range_t=40.0)
        self.cov = cov_matrix(self.sites, self.params)

    def test_exact_with_full_conditioning(self):
        factor = vecchia_factor(self.sites, self.params, m=24)
        np.testing.assert_allclose(
            factor.precision().toarray() @ self.cov, np.eye(25), atol=1e-8
        )

    def test_loglik_matches_dense_density(self):
        factor = vecchia_factor(self.sites, self.params, m=24)
        values = np.random.default_rng(2).standard_normal((25, 3))
        expected = multivariate_normal(np.zeros(25), self.cov).logpdf(values.T)
        np.testing.assert_allclose(factor.loglik(values), expected, rtol=1e-8)

    def test_logdet(self):
        factor = vecchia_factor(self.sites, self.params, m=24)
        _, logdet = np.linalg.slogdet(self.cov)
        self.assertAlmostEqual(factor.logdet_prec, -logdet, places=7)

    def test_structure_conditions_on_earlier_sites(self):
        structure = vecchia_structure(self.sites, self.params, m=4)
        self.assertEqual(sorted(structure.ordering), list(range(25)))
        for k, row in enumerate(structure.neighbors):
            chosen = row[row >= 0]
            self.assertEqual(len(chosen), min(k, 4))
            self.assertTrue(np.all(chosen < k))

    def test_small_neighbor_sets_stay_positive_definite(self):
        factor = vecchia_factor(self.sites, self.params, m=3)
        self.assertGreater(np.linalg.eigvalsh(factor.precision().toarray()).min(), 0.0)

    def test_divergence_shrinks_with_more_neighbors(self):
        rng = np.random.default_rng(5)
        sites = SpaceTimeSites(rng.random((50, 2)), np.zeros(50), "euclidean")
        params = KernelParams(variance=1.0, range_x=0.25)
        cov = cov_matrix(sites, params)
        divergences = []
        for m in (1, 3, 5, 10):
            prec = vecchia_factor(sites, params, m=m).precision().toarray()
            product = prec @ cov
            _, logdet = np.linalg.slogdet(product)
            divergences.append(0.5 * (np.trace(product) - 50 - logdet))
        self.assertGreaterEqual(divergences[0], 0.0)
        for coarse, fine in zip(divergences, divergences[1:]):
            self.assertLessEqual(fine, coarse + 1e-8)

    def test_duplicate_sites(self):
        sites = SpaceTimeSites(np.zeros((2, 2)), np.zeros(2), "euclidean")
        factor = vecchia_factor(sites, KernelParams(), m=1)
        self.assertTrue(np.all(factor.cond_var > 0))

    def test_orderings(self):
        dist = np.zeros((25, 25))
        for method in ("coordinate", "random"):
            order = order_sites(dist, self.sites, method, np.random.default_rng(0))
            self.assertEqual(sorted(order), list(range(25)))
        with self.assertRaises(ValueError):
            order_sites(dist, self.sites, "spiral")

    def test_invalid_neighbor_count(self):
        with self.assertRaises(ValueError):
            vecchia_structure(self.sites, self.params, m=0)


class TestConjugateGradient(unittest.TestCase):
    def test_matches_dense_solve(self):
        A = spd_matrix(60, 0.5, 20.0, 1)
        b = np.random.default_rng(0).standard_normal(60)
        x = cg_solve(lambda v: A @ v, b, rel_tol=1e-12, diagonal=np.diag(A))
        np.testing.assert_allclose(x, np.linalg.solve(A, b), atol=1e-8)

    def test_zero_rhs(self):
        x = cg_solve(lambda v: v, np.zeros(4))
        np.testing.assert_array_equal(x, np.zeros(4))

    def test_iteration_cap_raises(self):
        A = spd_matrix(30, 0.1, 100.0, 2)
        with self.assertRaises(CokrigingError) as cm:
            cg_solve(lambda v: A @ v, np.ones(30), rel_tol=1e-14, max_iter=2)
        self.assertEqual(cm.exception.error_code, "E007")

    def test_indefinite_operator_raises(self):
        with self.assertRaises(CokrigingError):
            cg_solve(lambda v: -v, np.ones(3))


class TestLanczos(unittest.TestCase):
    def test_quadform(self):
        M = spd_matrix(60, 1.0, 10.0, 3)
        v = np.random.default_rng(1).standard_normal(60)
        exact = v @ np.linalg.solve(M, v)
        self.assertAlmostEqual(lanczos_quadform(lambda x: M @ x, v) / exact, 1.0, places=4)

    def test_hutchinson_logdet(self):
        M = spd_matrix(60, 1.5, 2.5, 4)
        _, exact = np.linalg.slogdet(M)
        estimate = logdet_hutchinson(lambda x: M @ x, 60, 64, np.random.default_rng(0))
        self.assertLess(abs(estimate - exact) / abs(exact), 0.02)

    def test_sqrt_sample_is_symmetric_root(self):
        Q = spd_matrix(50, 0.5, 5.0, 5)
        draw = lanczos_sqrt_sample(lambda x: Q @ x, 50, np.random.default_rng(9), tol=1e-12)
        w = np.random.default_rng(9).standard_normal(50)
        root = linalg.sqrtm(np.linalg.inv(Q)).real
        np.testing.assert_allclose(draw, root @ w, atol=1e-6)

    def test_sqrt_sample_covariance(self):
        Q = spd_matrix(5, 0.5, 3.0, 6)
        rng = np.random.default_rng(7)
        draws = np.array([lanczos_sqrt_sample(lambda x: Q @ x, 5, rng) for _ in range(4000)])
        np.testing.assert_allclose(np.cov(draws.T), np.linalg.inv(Q), atol=0.15)

    def test_empty_operator(self):
        self.assertEqual(logdet_hutchinson(lambda x: x, 0, 4, np.random.default_rng(0)), 0.0)
        self.assertEqual(lanczos_quadform(lambda x: x, np.zeros(3)), 0.0)


if __name__ == "__main__":
    unittest.main()
