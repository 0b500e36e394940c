"""
Tests for score posteriors and likelihoods against dense Gaussian computations
"""

import unittest

import numpy as np
from scipy import linalg
from scipy.stats import multivariate_normal

from cokriging.errors import CokrigingError
from cokriging.model.likelihood import (
    SolverOptions,
    assemble_scores,
    conditional_scores,
    importance_weights,
    loglik_table,
    marginal_loglik,
    normalize_log_weights,
)
from cokriging.model.types import ClusterParams, ModelParams, Profile, prepare_profiles
from cokriging.spatial.covariance import KernelParams, SpaceTimeSites, cov_matrix
from cokriging.splines.basis import build_basis

N_SITES = 5
DENSE = SolverOptions(vecchia_m=10, dense_threshold=10_000)


def small_problem(seed=0):
    rng = np.random.default_rng(seed)
    basis = build_basis(0.0, 1.0, 3)
    P = basis.P
    sites = SpaceTimeSites(rng.random((N_SITES, 2)), np.zeros(N_SITES), "euclidean")
    profiles = [
        Profile(
            f"p{i}",
            tuple(sites.coords[i]),
            0.0,
            rng.random(4),
            rng.standard_normal(4),
            [rng.random(3)],
            [rng.standard_normal(3)],
        )
        for i in range(N_SITES)
    ]
    clusters = [
        ClusterParams(
            upsilon_y=rng.standard_normal((P, 1)),
            upsilon_x=rng.standard_normal((P, 1)),
            theta_x=rng.standard_normal((P, 1)),
            theta_e=rng.standard_normal((P, 1)),
            lam=rng.standard_normal((P, 1)),
            alpha_kernels=[KernelParams(1.0 + g, range_x=0.3)],
            eta_kernels=[KernelParams(0.5, range_x=0.2 + 0.1 * g)],
        )
        for g in range(2)
    ]
    omega = ModelParams(
        G=2, Q1=1, Q2=1, R=0, K=1, clusters=clusters,
        sigma2_y=0.3, sigma2_x=[0.2], xi=0.5,
    )
    prepared = prepare_profiles(profiles, basis, 0, K=1)
    return prepared, sites, omega


def dense_cluster(prepared, sites, omega, members, g, independent=False):
    """Residual vector, loading matrix, score covariance and noise of cluster g."""
    cluster = omega.clusters[g]
    n = len(members)
    resid, rows, noise = [], [], []
    for a, i in enumerate(members):
        prep = prepared[i]
        H = np.zeros((len(prep.y), 2 * n))
        H[:, a] = prep.B_y @ cluster.lam[:, 0]
        H[:, n + a] = prep.B_y @ cluster.theta_e[:, 0]
        resid.append(prep.y - prep.B_y @ cluster.upsilon_y @ prep.delta)
        rows.append(H)
        noise.append(np.full(len(prep.y), omega.sigma2_y))
        Hx = np.zeros((len(prep.x[0]), 2 * n))
        Hx[:, a] = prep.B_x[0] @ cluster.theta_x[:, 0]
        resid.append(prep.x[0] - prep.B_x[0] @ cluster.upsilon_x @ prep.delta)
        rows.append(Hx)
        noise.append(np.full(len(prep.x[0]), omega.sigma2_x[0]))
    sub = sites.subset(np.asarray(members))
    blocks = [
        np.diag(np.full(n, k.variance)) if independent else cov_matrix(sub, k)
        for k in cluster.kernels
    ]
    return (
        np.concatenate(resid),
        np.vstack(rows),
        linalg.block_diag(*blocks),
        np.diag(np.concatenate(noise)),
    )


def dense_loglik(prepared, sites, omega, z, independent=False):
    total = 0.0
    for g in range(omega.G):
        members = np.flatnonzero(z == g)
        if len(members) == 0:
            continue
        r, H, S, D = dense_cluster(prepared, sites, omega, members, g, independent)
        total += multivariate_normal(np.zeros(len(r)), H @ S @ H.T + D).logpdf(r)
    return total


class TestMarginalLikelihood(unittest.TestCase):
    def setUp(self):
        self.prepared, self.sites, self.omega = small_problem()
        self.z = np.array([0, 1, 0, 0, 1])

    def test_matches_dense_gaussian(self):
        value = marginal_loglik(self.prepared, self.sites, self.z, self.omega, DENSE)
        expected = dense_loglik(self.prepared, self.sites, self.omega, self.z)
        self.assertAlmostEqual(value, expected, places=6)

    def test_single_cluster_labels(self):
        z = np.zeros(N_SITES, dtype=int)
        value = marginal_loglik(self.prepared, self.sites, z, self.omega, DENSE)
        expected = dense_loglik(self.prepared, self.sites, self.omega, z)
        self.assertAlmostEqual(value, expected, places=6)

    def test_independent_scores_match_table(self):
        table = loglik_table(self.prepared, self.omega)
        posteriors = conditional_scores(
            self.prepared, self.sites, self.z, self.omega, DENSE, independent=True
        )
        total = sum(p.loglik for p in posteriors)
        self.assertAlmostEqual(total, table[np.arange(N_SITES), self.z].sum(), places=6)
        expected = dense_loglik(
            self.prepared, self.sites, self.omega, self.z, independent=True
        )
        self.assertAlmostEqual(total, expected, places=6)


class TestConditionalScores(unittest.TestCase):
    def setUp(self):
        self.prepared, self.sites, self.omega = small_problem(1)
        self.z = np.array([1, 1, 0, 1, 0])

    def test_posterior_mean_and_covariance(self):
        posteriors = conditional_scores(
            self.prepared, self.sites, self.z, self.omega, DENSE
        )
        for g, post in enumerate(posteriors):
            members = np.flatnonzero(self.z == g)
            np.testing.assert_array_equal(post.site_index, members)
            r, H, S, D = dense_cluster(self.prepared, self.sites, self.omega, members, g)
            gain = S @ H.T @ np.linalg.inv(H @ S @ H.T + D)
            np.testing.assert_allclose(post.mean, gain @ r, atol=1e-8)
            cov = S - gain @ H @ S
            n = len(members)
            for a in range(n):
                idx = [a, n + a]
                np.testing.assert_allclose(
                    post.site_covariance(a), cov[np.ix_(idx, idx)], atol=1e-8
                )

    def test_iterative_solver_matches_dense_mean(self):
        iterative = SolverOptions(vecchia_m=10, dense_threshold=0, cg_rel_tol=1e-12)
        dense = conditional_scores(
            self.prepared, self.sites, self.z, self.omega, DENSE, compute_loglik=False
        )
        sparse = conditional_scores(
            self.prepared, self.sites, self.z, self.omega, iterative, compute_loglik=False
        )
        for a, b in zip(dense, sparse):
            self.assertIsNone(b.chol)
            np.testing.assert_allclose(a.mean, b.mean, atol=1e-6)
            np.testing.assert_allclose(
                a.site_covariance(0), b.site_covariance(0), atol=1e-6
            )

    def test_include_all_spans_every_site(self):
        posteriors = conditional_scores(
            self.prepared, self.sites, self.z, self.omega, DENSE,
            include_all=True, compute_loglik=False,
        )
        for post in posteriors:
            self.assertEqual(post.n_sites, N_SITES)
            self.assertIsNone(post.loglik)

    def test_assembled_draws_use_own_cluster(self):
        posteriors = conditional_scores(
            self.prepared, self.sites, self.z, self.omega, DENSE, compute_loglik=False
        )
        rng = np.random.default_rng(2)
        draws = [p.sample(rng) for p in posteriors]
        alpha, eta = assemble_scores(posteriors, draws, self.z)
        self.assertEqual(alpha.shape, (N_SITES, 1))
        for post, vec in zip(posteriors, draws):
            a, e = post.split(vec)
            np.testing.assert_array_equal(alpha[post.site_index], a)
            np.testing.assert_array_equal(eta[post.site_index], e)


class TestImportanceWeights(unittest.TestCase):
    def test_normalization(self):
        weights, ess = normalize_log_weights(np.array([0.0, np.log(3.0), -np.inf]))
        np.testing.assert_allclose(weights, [0.25, 0.75, 0.0])
        self.assertAlmostEqual(ess, 1.0 / (0.25**2 + 0.75**2))

    def test_all_zero_weights(self):
        with self.assertRaises(CokrigingError) as ctx:
            normalize_log_weights(np.array([-np.inf, np.nan]))
        self.assertEqual(ctx.exception.error_code, "E008")

    def test_weights_are_likelihood_ratios(self):
        prepared, sites, omega = small_problem(2)
        draws = [np.array([0, 0, 1, 1, 0]), np.array([1, 1, 1, 0, 0])]
        weights, log_w, ess = importance_weights(draws, prepared, sites, omega, DENSE)
        table = loglik_table(prepared, omega)
        for z, lw in zip(draws, log_w):
            expected = dense_loglik(prepared, sites, omega, z) - table[np.arange(N_SITES), z].sum()
            self.assertAlmostEqual(lw, expected, places=6)
        self.assertAlmostEqual(weights.sum(), 1.0)
        self.assertGreaterEqual(ess, 1.0)


if __name__ == "__main__":
    unittest.main()
