"""
Tests for EM starting values
"""

import unittest

import numpy as np

from cokriging.config import FitConfig
from cokriging.em.engine import prepare_training
from cokriging.em.initialize import (
    functional_pca,
    initialize,
    interpolation_features,
    kmeans_labels,
)
from cokriging.errors import CokrigingError
from cokriging.model.types import Profile
from cokriging.splines.basis import build_basis


def two_regimes(n_per=15, seed=0, channels=True):
    """Profiles whose response curves come from two well separated shapes."""
    rng = np.random.default_rng(seed)
    profiles = []
    for g, shape in enumerate((np.sin, np.cos)):
        for i in range(n_per):
            p = np.sort(rng.random(12))
            y = 5.0 * shape(3 * p) + 0.05 * rng.standard_normal(12)
            x_p = [np.sort(rng.random(8))] if channels else []
            x_v = [2.0 * x_p[0] + g + 0.05 * rng.standard_normal(8)] if channels else []
            profiles.append(
                Profile(f"g{g}_{i}", tuple(rng.random(2)), 0.0, p, y, x_p, x_v)
            )
    return profiles


class TestFeatures(unittest.TestCase):
    def test_missing_channel_is_filled(self):
        basis = build_basis(0.0, 1.0, 4)
        profiles = [
            Profile("a", (0, 0), 0, [0.0, 1.0], [0.0, 2.0], [[0.0, 1.0]], [[1.0, 1.0]]),
            Profile("b", (0, 0), 0, [0.0, 1.0], [2.0, 0.0]),
        ]
        features = interpolation_features(profiles, basis, grid_points=5)
        self.assertEqual(features.shape, (2, 10))
        self.assertFalse(np.isnan(features).any())
        np.testing.assert_array_equal(features[0, 5:], features[1, 5:])

    def test_no_measurements(self):
        basis = build_basis(0.0, 1.0, 4)
        with self.assertRaises(CokrigingError):
            interpolation_features([Profile("a", (0, 0), 0)], basis)


class TestKMeans(unittest.TestCase):
    def test_separates_blobs(self):
        rng = np.random.default_rng(1)
        features = np.vstack(
            [rng.normal(0, 0.1, (20, 3)), rng.normal(5, 0.1, (20, 3))]
        )
        labels = kmeans_labels(features, 2, 5, rng)
        self.assertEqual(len(set(labels[:20])), 1)
        self.assertEqual(len(set(labels[20:])), 1)
        self.assertNotEqual(labels[0], labels[-1])

    def test_single_cluster(self):
        labels = kmeans_labels(np.ones((4, 2)), 1, 3, np.random.default_rng(0))
        np.testing.assert_array_equal(labels, 0)


class TestFunctionalPCA(unittest.TestCase):
    def test_dominant_direction(self):
        rng = np.random.default_rng(2)
        direction = np.array([3.0, 4.0, 0.0]) / 5.0
        coefs = np.outer(rng.standard_normal(500) * 3.0, direction)
        coefs += 0.01 * rng.standard_normal(coefs.shape)
        coefs -= coefs.mean(axis=0)
        loadings, scores, variances = functional_pca(coefs, np.eye(3), 2)
        np.testing.assert_allclose(np.abs(loadings[:, 0]), direction, atol=1e-2)
        np.testing.assert_allclose(loadings.T @ loadings, np.eye(2), atol=1e-10)
        self.assertGreater(variances[0], variances[1])
        self.assertEqual(scores.shape, (500, 2))

    def test_weighted_gram(self):
        rng = np.random.default_rng(3)
        gram = np.array([[2.0, 0.5], [0.5, 1.0]])
        loadings, _, _ = functional_pca(rng.standard_normal((50, 2)), gram, 2)
        np.testing.assert_allclose(loadings.T @ gram @ loadings, np.eye(2), atol=1e-10)

    def test_no_components(self):
        loadings, scores, variances = functional_pca(np.zeros((5, 3)), np.eye(3), 0)
        self.assertEqual(loadings.shape, (3, 0))
        self.assertEqual(len(variances), 0)


class TestInitialize(unittest.TestCase):
    def setUp(self):
        self.config = FitConfig(
            n_clusters=2, n_predictor_pcs=1, n_residual_pcs=1, n_harmonics=0,
            coordinate_mode="euclidean",
        )

    def run_init(self, profiles, config):
        basis, prepared, sites = prepare_training(profiles, config)
        return initialize(profiles, prepared, sites, basis, config, np.random.default_rng(0))

    def test_recovers_regimes(self):
        result = self.run_init(two_regimes(), self.config)
        labels = result.labels
        self.assertEqual(len(set(labels[:15])), 1)
        self.assertEqual(len(set(labels[15:])), 1)
        self.assertNotEqual(labels[0], labels[-1])
        omega = result.omega
        self.assertEqual((omega.G, omega.Q1, omega.Q2, omega.K), (2, 1, 1, 1))
        for cluster in omega.clusters:
            self.assertEqual(cluster.theta_x.shape, (omega.K * 12, 1))
            self.assertEqual(cluster.lam.shape, (12, 1))
            self.assertTrue(np.all(cluster.score_variances > 0))

    def test_predictor_components_need_channels(self):
        with self.assertRaises(CokrigingError) as ctx:
            self.run_init(two_regimes(channels=False), self.config)
        self.assertEqual(ctx.exception.error_code, "E001")

    def test_too_many_residual_components(self):
        config = self.config.model_copy(update={"n_residual_pcs": 50})
        with self.assertRaises(CokrigingError):
            self.run_init(two_regimes(), config)

    def test_clusters_need_responses(self):
        profiles = [p.without_response() for p in two_regimes()][:-1]
        profiles.append(two_regimes()[-1])
        with self.assertRaises(CokrigingError):
            self.run_init(profiles, self.config)


if __name__ == "__main__":
    unittest.main()
