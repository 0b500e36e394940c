"""
Tests for profile and parameter types
"""

import unittest

import numpy as np

from cokriging.model.types import (
    Penalties,
    Profile,
    prepare_profiles,
    profile_sites,
    seasonal_covariates,
)
from cokriging.splines.basis import build_basis


class TestProfile(unittest.TestCase):
    def test_measurements_are_sorted_by_pressure(self):
        profile = Profile(
            "p1", (1, 2), 10, [0.5, 0.1, 0.3], [5.0, 1.0, 3.0], [[0.2, 0.1]], [[2.0, 1.0]]
        )
        np.testing.assert_array_equal(profile.y_pressures, [0.1, 0.3, 0.5])
        np.testing.assert_array_equal(profile.y_values, [1.0, 3.0, 5.0])
        np.testing.assert_array_equal(profile.x_values[0], [1.0, 2.0])
        self.assertEqual(profile.n_obs, 5)
        self.assertTrue(profile.has_response)

    def test_mismatched_lengths(self):
        with self.assertRaises(ValueError):
            Profile("p1", (0, 0), 0, [0.1, 0.2], [1.0])
        with self.assertRaises(ValueError):
            Profile("p1", (0, 0), 0, x_pressures=[[0.1]], x_values=[])

    def test_channel_padding_and_response_removal(self):
        profile = Profile("p1", (0, 0), 0, [0.1], [1.0], [[0.1]], [[2.0]])
        padded = profile.with_channels(3)
        self.assertEqual(padded.n_channels, 3)
        self.assertEqual(len(padded.x_values[2]), 0)
        self.assertIs(profile.with_channels(1), profile)
        self.assertFalse(profile.without_response().has_response)
        self.assertEqual(profile.without_response().n_channels, 1)

    def test_profile_sites(self):
        profiles = [Profile("a", (10, 20), 5), Profile("b", (30, -40), 6)]
        sites = profile_sites(profiles, "sphere")
        np.testing.assert_array_equal(sites.coords, [[10, 20], [30, -40]])
        np.testing.assert_array_equal(sites.times, [5, 6])
        self.assertEqual(len(profile_sites([], "euclidean")), 0)


class TestSeasonalCovariates(unittest.TestCase):
    def test_layout(self):
        delta = seasonal_covariates(365.25 / 4, 2)
        np.testing.assert_allclose(delta, [1.0, 1.0, 0.0, 0.0, -1.0], atol=1e-12)
        np.testing.assert_array_equal(seasonal_covariates(100.0, 0), [1.0])

    def test_negative_harmonics(self):
        with self.assertRaises(ValueError):
            seasonal_covariates(0.0, -1)


class TestPrepareProfiles(unittest.TestCase):
    def test_shapes(self):
        basis = build_basis(0.0, 1.0, 4)
        profiles = [
            Profile("a", (0, 0), 0, [0.1, 0.5], [1.0, 2.0], [[0.2]], [[3.0]]),
            Profile("b", (1, 1), 0, [], [], [], []),
        ]
        prepared = prepare_profiles(profiles, basis, 1, K=2)
        self.assertEqual(prepared[0].B_y.shape, (2, basis.P))
        self.assertEqual(len(prepared[0].B_x), 2)
        self.assertEqual(prepared[0].B_x[1].shape, (0, basis.P))
        self.assertEqual(prepared[0].delta.shape, (3,))
        self.assertFalse(prepared[1].has_data)

    def test_too_many_channels(self):
        basis = build_basis(0.0, 1.0, 4)
        profile = Profile("a", (0, 0), 0, x_pressures=[[0.1], [0.2]], x_values=[[1.0], [2.0]])
        with self.assertRaises(ValueError):
            prepare_profiles([profile], basis, 0, K=1)

    def test_pressure_outside_domain(self):
        basis = build_basis(0.0, 1.0, 4)
        with self.assertRaises(ValueError):
            prepare_profiles([Profile("a", (0, 0), 0, [1.5], [1.0])], basis, 0)


class TestPenalties(unittest.TestCase):
    def test_negative_penalty(self):
        with self.assertRaises(ValueError):
            Penalties(lam=-1.0)


if __name__ == "__main__":
    unittest.main()
