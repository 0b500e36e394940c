"""
Tests for the Monte Carlo EM driver
"""

import unittest

import numpy as np

from cokriging.config import (
    GraphConfig,
    InitConfig,
    KernelConfig,
    SimConfig,
    simulation_fit_config,
)
from cokriging.em.engine import fit, prepare_training, training_graph
from cokriging.errors import CokrigingError
from cokriging.io.model_store import orthonormality_residuals
from cokriging.model.types import Profile
from cokriging.simulate.generator import generate


def small_config(**overrides):
    settings = dict(
        mc_samples=4,
        max_iters=2,
        gibbs_burn_in=2,
        n_residual_pcs=2,
        kernel=KernelConfig(max_evals=15),
        init=InitConfig(independent_em_iters=1, kmeans_restarts=2),
        seed=7,
    )
    settings.update(overrides)
    return simulation_fit_config(**settings)


class TestFit(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        sim = SimConfig(n_sites=24, n_obs=10, burn_in_sweeps=20, seed=1)
        cls.data = generate(sim, np.random.default_rng(1))

    def test_fit_records_traces(self):
        calls = []
        state = fit(self.data.profiles, small_config(), callback=calls.append)
        self.assertEqual(state.iteration, 2)
        self.assertEqual(len(calls), 3)
        self.assertEqual(len(state.loglik_trace), 2)
        self.assertEqual(len(state.ess_trace), 2)
        self.assertTrue(all(np.isfinite(state.loglik_trace)))
        self.assertTrue(all(1.0 <= e <= 4.0 + 1e-9 for e in state.ess_trace))
        self.assertTrue(0.0 <= state.omega.xi <= 20.0)
        self.assertEqual(state.phase, "spatial")
        self.assertEqual(len(state.samples), 4)
        self.assertAlmostEqual(sum(s.norm_weight for s in state.samples), 1.0)

    def test_trace_rises_within_monte_carlo_error(self):
        state = fit(
            self.data.profiles, small_config(max_iters=11, mc_samples=8, tol=1e-12)
        )
        values = np.array(state.loglik_trace)
        ses = np.array(state.loglik_se_trace)
        self.assertEqual(len(values), 11)
        allowance = 3.0 * np.sqrt(ses[:-1] ** 2 + ses[1:] ** 2) + 1e-8 * np.abs(values[1:])
        rising = np.diff(values) >= -allowance
        self.assertGreaterEqual(rising.mean(), 0.9)

    def test_loadings_are_orthonormal(self):
        state = fit(self.data.profiles, small_config())
        for entry in orthonormality_residuals(state.omega, state.basis):
            self.assertLess(entry["theta_e"], 1e-8)

    def test_reproducible_across_thread_counts(self):
        one = fit(self.data.profiles, small_config(max_iters=1))
        two = fit(self.data.profiles, small_config(max_iters=1, n_threads=3))
        self.assertEqual(one.loglik_trace, two.loglik_trace)
        np.testing.assert_array_equal(one.assignments(), two.assignments())
        self.assertEqual(one.omega.xi, two.omega.xi)

    def test_zero_iterations_is_initialization(self):
        state = fit(self.data.profiles, small_config(max_iters=0))
        self.assertEqual(state.iteration, 0)
        self.assertEqual(state.loglik_trace, [])
        self.assertEqual(len(state.init_labels), 24)
        self.assertFalse(state.converged)

    def test_single_cluster(self):
        state = fit(self.data.profiles, small_config(n_clusters=1, max_iters=1))
        np.testing.assert_array_equal(state.assignments(), 0)
        self.assertEqual(state.omega.G, 1)


class TestTrainingInputs(unittest.TestCase):
    def test_no_profiles(self):
        with self.assertRaises(CokrigingError) as ctx:
            prepare_training([], small_config())
        self.assertEqual(ctx.exception.exit_code, 2)

    def test_pressure_outside_basis(self):
        profile = Profile("a", (0.5, 0.5), 0.0, [0.5, 1.5], [1.0, 2.0])
        with self.assertRaises(CokrigingError) as ctx:
            prepare_training([profile], small_config())
        self.assertEqual(ctx.exception.error_code, "E009")
        self.assertEqual(ctx.exception.exit_code, 3)

    def test_graph_degree_is_capped(self):
        profiles = [
            Profile(f"p{i}", (i / 5, 0.0), 0.0, [0.5], [1.0]) for i in range(4)
        ]
        config = small_config(graph=GraphConfig(k=10, weighting="unit"))
        _, _, sites = prepare_training(profiles, config)
        graph = training_graph(sites, config)
        self.assertEqual(graph.k, 3)
        self.assertEqual(graph.weights.nnz, 12)


if __name__ == "__main__":
    unittest.main()
