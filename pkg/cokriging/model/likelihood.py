"""
Conditional score distributions and likelihoods.

Given labels, the scores of cluster g form Gaussian random fields (one per
principal component) over the sites of that cluster. Conditioning on the data
gives a Gaussian in precision form, precision = A^-1 + U^T U, where A^-1 is the
block-diagonal Vecchia precision of the fields and U^T U collects the
per-profile information matrices. The same factorization yields log f(X, Y | z)
through the matrix determinant lemma and the Woodbury identity.

Score vectors are laid out component-major: entry l * n_sites + a holds score l
of local site a, with the Q1 predictor components before the Q2 residual ones.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg, sparse
from scipy.special import logsumexp

from cokriging.errors import CokrigingError
from cokriging.model.types import ClusterParams, ModelParams, PreparedProfile
from cokriging.spatial.covariance import KernelParams, SpaceTimeSites
from cokriging.spatial.sparse_gp import (
    Ordering,
    VecchiaFactor,
    cg_solve,
    lanczos_quadform,
    lanczos_sqrt_sample,
    logdet_hutchinson,
    vecchia_factor,
)

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2 * np.pi))


@dataclass(frozen=True)
class SolverOptions:
    """Numerical settings shared by posterior and likelihood evaluations."""

    vecchia_m: int = 10
    ordering: Ordering = "maxmin"
    dense_threshold: int = 500
    cg_rel_tol: float = 1e-10
    n_probes: int = 32
    lanczos_tol: float = 1e-6


@dataclass(frozen=True, eq=False)
class ProfileTerms:
    """
    Sufficient statistics of one profile under one cluster.

    Attributes:
        M: Information matrix H^T D^-1 H of the scores
        b: H^T D^-1 r with r the data minus the seasonal means
        rss: r^T D^-1 r
        logdet_noise: log|D|
        n: Number of measurements
    """

    M: np.ndarray
    b: np.ndarray
    rss: float
    logdet_noise: float
    n: int


def profile_terms(
    prep: PreparedProfile, cluster: ClusterParams, omega: ModelParams
) -> ProfileTerms:
    """Information matrix, score right-hand side and residual sum of one profile."""
    q1, q = omega.Q1, omega.n_scores
    n_basis = cluster.theta_e.shape[0]
    M = np.zeros((q, q))
    b = np.zeros(q)
    rss, logdet, n = 0.0, 0.0, 0

    if prep.has_response:
        resid = prep.y - prep.B_y @ (cluster.upsilon_y @ prep.delta)
        H = prep.B_y @ np.hstack([cluster.lam, cluster.theta_e])
        M += H.T @ H / omega.sigma2_y
        b += H.T @ resid / omega.sigma2_y
        rss += float(resid @ resid) / omega.sigma2_y
        logdet += len(resid) * np.log(omega.sigma2_y)
        n += len(resid)

    for k, (values, B) in enumerate(zip(prep.x, prep.B_x)):
        if len(values) == 0:
            continue
        rows = slice(k * n_basis, (k + 1) * n_basis)
        var = omega.sigma2_x[k]
        resid = values - B @ (cluster.upsilon_x[rows] @ prep.delta)
        H = np.zeros((len(values), q))
        H[:, :q1] = B @ cluster.theta_x[rows]
        M += H.T @ H / var
        b += H.T @ resid / var
        rss += float(resid @ resid) / var
        logdet += len(resid) * np.log(var)
        n += len(resid)

    return ProfileTerms(M=M, b=b, rss=rss, logdet_noise=logdet, n=n)


def cluster_terms(
    prepared: list[PreparedProfile], omega: ModelParams
) -> list[list[ProfileTerms]]:
    """terms[g][i] for every cluster g and profile i."""
    return [[profile_terms(p, c, omega) for p in prepared] for c in omega.clusters]


def _terms_loglik(terms: ProfileTerms, score_var: np.ndarray) -> float:
    base = terms.n * LOG_2PI + terms.logdet_noise + terms.rss
    if len(score_var) == 0 or terms.n == 0:
        return -0.5 * base
    prec = np.diag(1.0 / score_var) + terms.M
    chol = linalg.cholesky(prec, lower=True)
    half = linalg.solve_triangular(chol, terms.b, lower=True)
    logdet = np.sum(np.log(score_var)) + 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (base + logdet - float(half @ half))


def per_profile_loglik(prep: PreparedProfile, g: int, omega: ModelParams) -> float:
    """
    log f(X_i, Y_i | Z_i = g) with spatially independent scores.

    Uses the marginal score variances; evaluated exactly through the Woodbury
    identity on the (Q1 + Q2)-dimensional score space.
    """
    cluster = omega.clusters[g]
    return _terms_loglik(profile_terms(prep, cluster, omega), cluster.score_variances)


def loglik_table(
    prepared: list[PreparedProfile],
    omega: ModelParams,
    terms: Optional[list[list[ProfileTerms]]] = None,
) -> np.ndarray:
    """(n, G) table of per-profile log-likelihoods under each cluster."""
    terms = cluster_terms(prepared, omega) if terms is None else terms
    table = np.zeros((len(prepared), omega.G))
    for g, cluster in enumerate(omega.clusters):
        variances = cluster.score_variances
        for i, t in enumerate(terms[g]):
            table[i, g] = _terms_loglik(t, variances)
    return table


class FactorCache:
    """Vecchia factors keyed by kernel and site subset, reused across draws."""

    def __init__(self, sites: SpaceTimeSites, options: SolverOptions):
        self.sites = sites
        self.options = options
        self._factors: dict = {}

    def get(self, params: KernelParams, index: np.ndarray) -> VecchiaFactor:
        key = (params, index.tobytes())
        factor = self._factors.get(key)
        if factor is None:
            factor = vecchia_factor(
                self.sites.subset(index),
                params,
                self.options.vecchia_m,
                self.options.ordering,
                np.random.default_rng(len(index)),
            )
            self._factors[key] = factor
        return factor


@dataclass(eq=False)
class ClusterPosterior:
    """
    Gaussian posterior of the score fields of one cluster.

    Attributes:
        cluster: Cluster index
        site_index: Global indices of the field sites
        Q1, Q2: Score dimensions
        precision: Posterior precision A^-1 + U^T U
        rhs: U^T D^-1/2 (X0; Y0)
        mean: Posterior mean
        logdet_prior_prec: log|A^-1|
        loglik: log-likelihood of the cluster's data (None if not computed)
    """

    cluster: int
    site_index: np.ndarray
    Q1: int
    Q2: int
    precision: sparse.csr_matrix
    rhs: np.ndarray
    mean: np.ndarray
    logdet_prior_prec: float
    options: SolverOptions
    chol: Optional[np.ndarray] = None
    loglik: Optional[float] = None
    logdet_prec: Optional[float] = field(default=None)

    @property
    def n_sites(self) -> int:
        return len(self.site_index)

    @property
    def dim(self) -> int:
        return self.n_sites * (self.Q1 + self.Q2)

    def _apply(self, v: np.ndarray) -> np.ndarray:
        return self.precision @ v

    def split(self, vec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Reshape a score vector into (n_sites, Q1) and (n_sites, Q2) arrays."""
        scores = vec.reshape(self.Q1 + self.Q2, self.n_sites).T
        return scores[:, : self.Q1], scores[:, self.Q1 :]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """One draw from the posterior."""
        if self.dim == 0:
            return np.zeros(0)
        if self.chol is not None:
            w = rng.standard_normal(self.dim)
            return self.mean + linalg.solve_triangular(self.chol.T, w, lower=False)
        return self.mean + lanczos_sqrt_sample(
            self._apply, self.dim, rng, tol=self.options.lanczos_tol
        )

    def site_covariance(self, local: int) -> np.ndarray:
        """Posterior covariance of all scores of one local site."""
        return self.site_covariances(np.array([local]))[0]

    def site_covariances(self, local: np.ndarray) -> np.ndarray:
        """(len(local), q, q) posterior score covariances of several local sites."""
        q = self.Q1 + self.Q2
        local = np.asarray(local, dtype=int)
        if q == 0 or len(local) == 0:
            return np.zeros((len(local), q, q))
        index = np.arange(q)[None, :] * self.n_sites + local[:, None]
        unit = np.zeros((self.dim, index.size))
        unit[index.ravel(), np.arange(index.size)] = 1.0
        if self.chol is not None:
            cols = linalg.cho_solve((self.chol, True), unit)
        else:
            diag = self.precision.diagonal()
            cols = np.column_stack(
                [
                    cg_solve(self._apply, unit[:, j], self.options.cg_rel_tol, None, diag)
                    for j in range(unit.shape[1])
                ]
            )
        cols = cols.reshape(self.dim, len(local), q)
        cov = np.stack([cols[index[a], a, :] for a in range(len(local))])
        return 0.5 * (cov + np.transpose(cov, (0, 2, 1)))


def _prior_precision(
    cluster: ClusterParams,
    index: np.ndarray,
    cache: Optional[FactorCache],
    independent: bool,
) -> tuple[sparse.csr_matrix, float]:
    n_sites = len(index)
    if n_sites == 0:
        return sparse.csr_matrix((0, 0)), 0.0
    blocks, logdet = [], 0.0
    for params in cluster.kernels:
        if independent or n_sites == 1:
            blocks.append(sparse.identity(n_sites, format="csr") / params.variance)
            logdet -= n_sites * np.log(params.variance)
        else:
            factor = cache.get(params, index)
            blocks.append(factor.precision())
            logdet += factor.logdet_prec
    if not blocks:
        return sparse.csr_matrix((0, 0)), 0.0
    return sparse.block_diag(blocks, format="csr").tocsr(), logdet


def _information(
    terms: list[ProfileTerms], local: np.ndarray, n_sites: int, q: int
) -> tuple[sparse.csr_matrix, np.ndarray]:
    dim = n_sites * q
    rhs = np.zeros(dim)
    if len(local) == 0 or q == 0:
        return sparse.csr_matrix((dim, dim)), rhs
    Ms = np.stack([t.M for t in terms])
    bs = np.stack([t.b for t in terms])
    comp = np.arange(q)
    rows = comp[None, :, None] * n_sites + local[:, None, None]
    cols = comp[None, None, :] * n_sites + local[:, None, None]
    rows, cols = np.broadcast_arrays(rows, cols)
    info = sparse.csr_matrix(
        (Ms.ravel(), (rows.ravel(), cols.ravel())), shape=(dim, dim)
    )
    np.add.at(rhs, (comp[None, :] * n_sites + local[:, None]).ravel(), bs.ravel())
    return info, rhs


def cluster_posterior(
    g: int,
    z: np.ndarray,
    terms_g: list[ProfileTerms],
    omega: ModelParams,
    options: SolverOptions,
    cache: Optional[FactorCache] = None,
    independent: bool = False,
    include_all: bool = False,
    compute_loglik: bool = True,
    rng: Optional[np.random.Generator] = None,
) -> ClusterPosterior:
    """
    Posterior of the score fields of cluster g given labels z.

    Args:
        g: Cluster index
        z: Labels of every site
        terms_g: Per-profile terms under cluster g
        omega: Model parameters
        options: Solver settings
        cache: Vecchia factor cache over the global site set
        independent: Use spatially independent score priors
        include_all: Let the fields span every site; only members carry data
        compute_loglik: Also evaluate log f(data of cluster g | z)
        rng: Generator for stochastic log-determinants (iterative path only)

    Returns:
        ClusterPosterior

    Raises:
        CokrigingError: If the precision is not positive definite or CG fails
    """
    cluster = omega.clusters[g]
    q = omega.n_scores
    index = np.arange(len(z)) if include_all else np.flatnonzero(z == g)
    members = z[index] == g
    local = np.flatnonzero(members)
    member_terms = [terms_g[i] for i in index[local]]

    prior, logdet_prior = _prior_precision(cluster, index, cache, independent)
    info, rhs = _information(member_terms, local, len(index), q)
    precision = (prior + info).tocsr() if q else sparse.csr_matrix((0, 0))
    dim = len(index) * q

    chol, mean, logdet_prec, quad = None, np.zeros(dim), 0.0, 0.0
    if dim and dim <= options.dense_threshold:
        try:
            chol = linalg.cholesky(precision.toarray(), lower=True)
        except linalg.LinAlgError as e:
            raise CokrigingError.not_positive_definite(
                f"score posterior precision of cluster {g + 1}"
            ) from e
        mean = linalg.cho_solve((chol, True), rhs)
        logdet_prec = 2.0 * float(np.sum(np.log(np.diag(chol))))
        quad = float(rhs @ mean)
    elif dim:
        diag = precision.diagonal()
        mean = cg_solve(lambda v: precision @ v, rhs, options.cg_rel_tol, None, diag)
        if compute_loglik:
            rng = rng if rng is not None else np.random.default_rng(0)
            logdet_prec = logdet_hutchinson(
                lambda v: precision @ v, dim, options.n_probes, rng
            )
            quad = lanczos_quadform(lambda v: precision @ v, rhs)

    loglik = None
    if compute_loglik:
        base = sum(t.n * LOG_2PI + t.logdet_noise + t.rss for t in member_terms)
        loglik = -0.5 * (base + logdet_prec - logdet_prior - quad)

    return ClusterPosterior(
        cluster=g,
        site_index=index,
        Q1=omega.Q1,
        Q2=omega.Q2,
        precision=precision,
        rhs=rhs,
        mean=mean,
        logdet_prior_prec=logdet_prior,
        options=options,
        chol=chol,
        loglik=loglik,
        logdet_prec=logdet_prec,
    )


def conditional_scores(
    prepared: list[PreparedProfile],
    sites: SpaceTimeSites,
    z: np.ndarray,
    omega: ModelParams,
    options: SolverOptions = SolverOptions(),
    terms: Optional[list[list[ProfileTerms]]] = None,
    cache: Optional[FactorCache] = None,
    independent: bool = False,
    include_all: bool = False,
    compute_loglik: bool = True,
    rng: Optional[np.random.Generator] = None,
) -> list[ClusterPosterior]:
    """
    Per-cluster Gaussian posteriors of the scores given labels and data.

    Returns:
        One ClusterPosterior per cluster, in cluster order
    """
    z = np.asarray(z, dtype=int)
    terms = cluster_terms(prepared, omega) if terms is None else terms
    cache = FactorCache(sites, options) if cache is None else cache
    return [
        cluster_posterior(
            g,
            z,
            terms[g],
            omega,
            options,
            cache,
            independent,
            include_all,
            compute_loglik,
            rng,
        )
        for g in range(omega.G)
    ]


def marginal_loglik(
    prepared: list[PreparedProfile],
    sites: SpaceTimeSites,
    z: np.ndarray,
    omega: ModelParams,
    options: SolverOptions = SolverOptions(),
    terms: Optional[list[list[ProfileTerms]]] = None,
    cache: Optional[FactorCache] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """log f(X, Y | Z = z) summed over clusters."""
    posteriors = conditional_scores(
        prepared, sites, z, omega, options, terms, cache, rng=rng
    )
    return float(sum(p.loglik for p in posteriors))


def assemble_scores(
    posteriors: list[ClusterPosterior], draws: list[np.ndarray], z: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Collect each site's scores from the field of its own cluster."""
    n = len(z)
    q1 = posteriors[0].Q1 if posteriors else 0
    q2 = posteriors[0].Q2 if posteriors else 0
    alpha, eta = np.zeros((n, q1)), np.zeros((n, q2))
    for post, vec in zip(posteriors, draws):
        if post.n_sites == 0:
            continue
        a, e = post.split(vec)
        own = z[post.site_index] == post.cluster
        alpha[post.site_index[own]] = a[own]
        eta[post.site_index[own]] = e[own]
    return alpha, eta


def normalize_log_weights(log_weights: np.ndarray) -> tuple[np.ndarray, float]:
    """
    Self-normalize log importance weights.

    Returns:
        (normalized weights, effective sample size)

    Raises:
        CokrigingError: If every weight is zero or non-finite
    """
    log_weights = np.asarray(log_weights, dtype=float)
    finite = np.isfinite(log_weights)
    if not finite.any():
        raise CokrigingError.numeric_failure(
            "importance weights", details="all log-weights are -inf or NaN"
        )
    log_weights = np.where(finite, log_weights, -np.inf)
    weights = np.exp(log_weights - logsumexp(log_weights))
    weights /= weights.sum()
    ess = float(1.0 / np.sum(weights**2))
    return weights, ess


def importance_weights(
    z_samples: list[np.ndarray],
    prepared: list[PreparedProfile],
    sites: SpaceTimeSites,
    omega: ModelParams,
    options: SolverOptions = SolverOptions(),
    table: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> tuple[np.ndarray, np.ndarray, float]:
    """
    Importance weights of label draws from the product-of-profiles proposal.

    The log-weight of z is log f(X, Y | z) - sum_i log f(X_i, Y_i | z_i).

    Returns:
        (normalized weights, log-weights, effective sample size)
    """
    terms = cluster_terms(prepared, omega)
    table = loglik_table(prepared, omega, terms) if table is None else table
    cache = FactorCache(sites, options)
    log_w = np.array(
        [
            marginal_loglik(prepared, sites, z, omega, options, terms, cache, rng)
            - table[np.arange(len(z)), z].sum()
            for z in z_samples
        ]
    )
    weights, ess = normalize_log_weights(log_w)
    return weights, log_w, ess
