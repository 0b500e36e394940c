"""
Tests for the cubic B-spline basis
"""

import unittest

import numpy as np

from cokriging.splines.basis import (
    block_gram,
    build_basis,
    evaluate,
    orthonormal_basis_coefficients,
    orthonormalize,
    penalty_quadform,
)


def greville(basis):
    """Coefficients reproducing f(p) = p exactly."""
    k = basis.knots
    return np.array([k[j + 1 : j + 4].mean() for j in range(basis.P)])


class TestBuildBasis(unittest.TestCase):
    def setUp(self):
        self.basis = build_basis(0.0, 2.0, 6)

    def test_dimension(self):
        self.assertEqual(self.basis.P, 10)
        self.assertEqual(self.basis.gram.shape, (10, 10))
        self.assertEqual(self.basis.penalty.shape, (10, 10))

    def test_partition_of_unity(self):
        p = np.linspace(0.0, 2.0, 41)
        np.testing.assert_allclose(evaluate(self.basis, p).sum(axis=1), 1.0, atol=1e-12)

    def test_gram_integrates_constants(self):
        ones = np.ones(self.basis.P)
        self.assertAlmostEqual(ones @ self.basis.gram @ ones, 2.0, places=12)

    def test_gram_integrates_linear_function(self):
        coef = greville(self.basis)
        # integral of p^2 over [0, 2]
        self.assertAlmostEqual(coef @ self.basis.gram @ coef, 8.0 / 3.0, places=10)

    def test_penalty_vanishes_on_linear_functions(self):
        self.assertAlmostEqual(penalty_quadform(self.basis, np.ones(self.basis.P)), 0.0)
        self.assertAlmostEqual(
            penalty_quadform(self.basis, greville(self.basis)), 0.0, places=9
        )

    def test_penalty_of_quadratic(self):
        # p^2 has second derivative 2, so the integral of its square is 8
        p = np.linspace(0.0, 2.0, 200)
        B = evaluate(self.basis, p)
        coef = np.linalg.lstsq(B, p**2, rcond=None)[0]
        self.assertAlmostEqual(penalty_quadform(self.basis, coef), 8.0, places=6)

    def test_scalar_evaluation(self):
        self.assertEqual(evaluate(self.basis, 0.5).shape, (self.basis.P,))

    def test_evaluation_outside_domain_raises(self):
        with self.assertRaises(ValueError):
            evaluate(self.basis, np.array([0.5, 2.5]))

    def test_invalid_domain_raises(self):
        with self.assertRaises(ValueError):
            build_basis(1.0, 1.0, 4)
        with self.assertRaises(ValueError):
            build_basis(0.0, 1.0, 0)

    def test_penalty_quadform_checks_length(self):
        with self.assertRaises(ValueError):
            penalty_quadform(self.basis, np.ones(3))

    def test_block_gram(self):
        gram = block_gram(self.basis, 2)
        np.testing.assert_allclose(gram[:10, :10], self.basis.gram)
        np.testing.assert_allclose(gram[:10, 10:], 0.0)


class TestOrthonormalBasis(unittest.TestCase):
    def test_orthonormal_and_triangular(self):
        basis = build_basis(0.0, 1.0, 7)
        coef = orthonormal_basis_coefficients(basis)
        np.testing.assert_allclose(coef.T @ basis.gram @ coef, np.eye(11), atol=1e-10)
        np.testing.assert_allclose(np.tril(coef, -1), 0.0)


class TestOrthonormalize(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(3)
        self.basis = build_basis(0.0, 1.0, 5)
        P = self.basis.P
        self.theta_x = rng.standard_normal((2 * P, 2))
        self.theta_e = rng.standard_normal((P, 3))
        self.lam = rng.standard_normal((P, 2))
        a = rng.standard_normal((2, 2))
        e = rng.standard_normal((3, 3))
        self.cov_x = a @ a.T + 0.1 * np.eye(2)
        self.cov_e = e @ e.T + 0.1 * np.eye(3)

    def run_orthonormalize(self):
        return orthonormalize(
            self.theta_x, self.theta_e, self.lam, self.cov_x, self.cov_e, self.basis.gram
        )

    def test_blocks_become_orthonormal(self):
        tx, te, _, _ = self.run_orthonormalize()
        gram_x = block_gram(self.basis, 2)
        np.testing.assert_allclose(tx.T @ gram_x @ tx, np.eye(2), atol=1e-8)
        np.testing.assert_allclose(te.T @ self.basis.gram @ te, np.eye(3), atol=1e-8)

    def test_fitted_functions_unchanged(self):
        tx, te, lam, rot = self.run_orthonormalize()
        np.testing.assert_allclose(tx @ rot["alpha"], self.theta_x, atol=1e-8)
        np.testing.assert_allclose(te @ rot["eta"], self.theta_e, atol=1e-8)
        np.testing.assert_allclose(lam @ rot["alpha"], self.lam, atol=1e-8)

    def test_rotated_variances(self):
        _, _, _, rot = self.run_orthonormalize()
        W = rot["eta"]
        np.testing.assert_allclose(
            np.diag(W @ self.cov_e @ W.T), rot["eta_var"], rtol=1e-8
        )
        self.assertTrue(np.all(np.diff(rot["eta_var"]) <= 0))

    def test_sign_convention(self):
        _, te, _, _ = self.run_orthonormalize()
        for col in te.T:
            first = col[np.flatnonzero(np.abs(col) > 1e-12)[0]]
            self.assertGreater(first, 0)

    def test_non_psd_covariance_raises(self):
        with self.assertRaises(ValueError):
            orthonormalize(
                self.theta_x,
                self.theta_e,
                self.lam,
                self.cov_x,
                -np.eye(3),
                self.basis.gram,
            )

    def test_empty_predictor_block(self):
        P = self.basis.P
        tx, te, lam, rot = orthonormalize(
            np.zeros((0, 0)), self.theta_e, np.zeros((P, 0)), np.zeros((0, 0)),
            self.cov_e, self.basis.gram,
        )
        self.assertEqual(tx.shape, (0, 0))
        self.assertEqual(lam.shape, (P, 0))
        self.assertEqual(rot["alpha"].shape, (0, 0))


if __name__ == "__main__":
    unittest.main()
