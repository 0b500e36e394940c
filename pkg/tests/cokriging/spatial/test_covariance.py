"""
Tests for space-time kernels and distances
"""

import unittest

import numpy as np
from scipy.special import gamma, kv

from cokriging.spatial.covariance import (
    KernelParams,
    SpaceTimeSites,
    cov_matrix,
    deformed_distance,
    domain_diameter,
    harmonic_gradients,
    kernel,
    lonlat_to_unit,
    pairwise_distance,
)


class TestKernelParams(unittest.TestCase):
    def test_rejects_non_positive_values(self):
        with self.assertRaises(ValueError):
            KernelParams(variance=0.0)
        with self.assertRaises(ValueError):
            KernelParams(range_x=-1.0)

    def test_exponential_requires_half_smoothness(self):
        with self.assertRaises(ValueError):
            KernelParams(kind="exponential", smoothness=1.5)

    def test_deformation_weight_count(self):
        with self.assertRaises(ValueError):
            KernelParams(deform_weights=(0.1, 0.2))

    def test_with_variance(self):
        params = KernelParams(variance=1.0, range_x=0.3)
        updated = params.with_variance(2.5)
        self.assertEqual(updated.variance, 2.5)
        self.assertEqual(updated.range_x, 0.3)


class TestKernel(unittest.TestCase):
    def test_value_at_zero_is_variance(self):
        params = KernelParams(variance=2.0, smoothness=1.5, kind="matern")
        self.assertAlmostEqual(kernel(0.0, params), 2.0)

    def test_exponential(self):
        params = KernelParams(variance=1.5)
        d = np.array([0.0, 0.5, 2.0])
        np.testing.assert_allclose(kernel(d, params), 1.5 * np.exp(-d))

    def test_matern_half_matches_exponential(self):
        matern = KernelParams(variance=1.0, smoothness=0.5, kind="matern")
        d = np.linspace(0.0, 3.0, 7)
        np.testing.assert_allclose(kernel(d, matern), np.exp(-d))

    def test_matern_three_halves(self):
        params = KernelParams(variance=1.0, smoothness=1.5, kind="matern")
        d = np.array([0.1, 1.0, 4.0])
        expected = 2.0 ** (1 - 1.5) / gamma(1.5) * d**1.5 * kv(1.5, d)
        np.testing.assert_allclose(kernel(d, params), expected, rtol=1e-12)

    def test_far_distances_do_not_produce_nan(self):
        params = KernelParams(variance=1.0, smoothness=2.5, kind="matern")
        self.assertTrue(np.all(np.isfinite(kernel(np.array([1e3, 1e5]), params))))


class TestDistances(unittest.TestCase):
    def test_unit_sphere_mapping(self):
        unit = lonlat_to_unit(np.array([[0.0, 0.0], [90.0, 0.0], [0.0, 90.0]]))
        np.testing.assert_allclose(unit, np.eye(3), atol=1e-12)

    def test_space_time_distance(self):
        sites = SpaceTimeSites(np.array([[0.0, 0.0], [3.0, 4.0]]), np.array([0.0, 10.0]), "euclidean")
        params = KernelParams(range_x=5.0, range_t=20.0)
        dist = pairwise_distance(sites, sites, params)
        self.assertAlmostEqual(dist[0, 1], 1.0 + 0.5)
        self.assertAlmostEqual(dist[0, 0], 0.0)

    def test_deformed_distance_reduces_to_chordal(self):
        params = KernelParams(range_x=1.0, range_t=1.0)
        d = deformed_distance((0.0, 0.0, 0.0), (90.0, 0.0, 0.0), params)
        self.assertAlmostEqual(d, np.sqrt(2.0))

    def test_deformation_changes_distance(self):
        plain = KernelParams(range_x=1.0)
        warped = KernelParams(range_x=1.0, deform_weights=(0.3, 0.0, 0.0, 0.0, 0.0))
        a, b = (10.0, 20.0, 0.0), (40.0, 35.0, 0.0)
        self.assertNotAlmostEqual(
            deformed_distance(a, b, plain), deformed_distance(a, b, warped)
        )

    def test_harmonic_gradients_are_tangent(self):
        rng = np.random.default_rng(0)
        coords = np.column_stack([rng.uniform(-180, 180, 20), rng.uniform(-80, 80, 20)])
        unit = lonlat_to_unit(coords)
        grads = harmonic_gradients(unit)
        np.testing.assert_allclose(np.einsum("nmk,nk->nm", grads, unit), 0.0, atol=1e-12)

    def test_deformation_rejected_in_euclidean_mode(self):
        sites = SpaceTimeSites(np.zeros((2, 2)), np.zeros(2), "euclidean")
        params = KernelParams(deform_weights=(0.1, 0.0, 0.0, 0.0, 0.0))
        with self.assertRaises(ValueError):
            pairwise_distance(sites, sites, params)

    def test_invalid_latitude_rejected(self):
        with self.assertRaises(ValueError):
            SpaceTimeSites(np.array([[0.0, 95.0]]), np.array([0.0]), "sphere")


class TestCovMatrix(unittest.TestCase):
    def test_symmetric_positive_definite(self):
        rng = np.random.default_rng(1)
        sites = SpaceTimeSites(rng.random((30, 2)), rng.random(30) * 100, "euclidean")
        cov = cov_matrix(sites, KernelParams(variance=2.0, range_x=0.2, range_t=50.0))
        np.testing.assert_allclose(cov, cov.T)
        np.testing.assert_allclose(np.diag(cov), 2.0)
        self.assertGreater(np.linalg.eigvalsh(cov).min(), 0.0)

    def test_domain_diameter(self):
        sites = SpaceTimeSites(np.array([[0.0, 0.0], [3.0, 4.0]]), np.zeros(2), "euclidean")
        self.assertAlmostEqual(domain_diameter(sites), 5.0)
        single = SpaceTimeSites(np.array([[1.0, 1.0]]), np.zeros(1), "euclidean")
        self.assertEqual(domain_diameter(single), 1.0)


if __name__ == "__main__":
    unittest.main()
