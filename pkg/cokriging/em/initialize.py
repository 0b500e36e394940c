"""
Starting values for the EM algorithm.

Profiles are interpolated to a common pressure grid and clustered with
k-means. Within each cluster a penalized functional PCA of the predictor and
response curves gives the loadings: the predictor components directly, the
response regression operator through the cross-covariance of response and
predictor scores, and the residual components from the eigenvectors of the
remaining response score covariance. EM iterations of the spatially independent
mixture (run by the driver) then refine the result.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.cluster.vq import ClusterError, kmeans2
from scipy.special import softmax

from cokriging.config import FitConfig
from cokriging.errors import CokrigingError
from cokriging.em.mstep import (
    ClusterMoments,
    channel_rows,
    m_step,
    response_rows,
    seasonal_mean,
)
from cokriging.model.likelihood import assemble_scores, conditional_scores, loglik_table
from cokriging.model.types import (
    ClusterParams,
    LatentSample,
    ModelParams,
    PreparedProfile,
    Profile,
)
from cokriging.spatial.covariance import KernelParams, SpaceTimeSites, domain_diameter
from cokriging.splines.basis import BasisSystem

logger = logging.getLogger(__name__)

KMEANS_ATTEMPTS = 5
VARIANCE_FLOOR = 1e-10


@dataclass(eq=False)
class InitResult:
    omega: ModelParams
    labels: np.ndarray


def interpolation_features(
    profiles: list[Profile], basis: BasisSystem, grid_points: int = 20
) -> np.ndarray:
    """
    Profiles linearly interpolated to a uniform pressure grid, channels stacked.

    Each channel block is scaled by its overall standard deviation. Channels a
    profile lacks are filled with the channel's grid-wise mean.
    """
    grid = np.linspace(basis.domain_lo, basis.domain_hi, grid_points)
    n_channels = max((p.n_channels for p in profiles), default=0)
    blocks = []
    channels = [(p.y_pressures, p.y_values) for p in profiles]
    for k in range(n_channels + 1):
        if k > 0:
            padded = [p.with_channels(n_channels) for p in profiles]
            channels = [(p.x_pressures[k - 1], p.x_values[k - 1]) for p in padded]
        block = np.full((len(profiles), grid_points), np.nan)
        for i, (pressures, values) in enumerate(channels):
            if len(values):
                block[i] = np.interp(grid, pressures, values)
        present = ~np.isnan(block[:, 0])
        if not present.any():
            continue
        fill = block[present].mean(axis=0)
        block[~present] = fill
        scale = float(np.std(block[present]))
        blocks.append(block / (scale if scale > 0 else 1.0))
    if not blocks:
        raise CokrigingError.invalid_config("data", "profiles contain no measurements")
    return np.hstack(blocks)


def kmeans_labels(
    features: np.ndarray, G: int, restarts: int, rng: np.random.Generator
) -> np.ndarray:
    """
    Best of several k-means++ runs by within-cluster sum of squares.

    Raises:
        CokrigingError: If every attempt leaves a cluster empty
    """
    if G == 1:
        return np.zeros(len(features), dtype=int)
    best, best_cost = None, np.inf
    for attempt in range(1, KMEANS_ATTEMPTS + 1):
        for _ in range(restarts):
            try:
                centers, labels = kmeans2(
                    features, G, minit="++", missing="raise", seed=rng
                )
            except ClusterError:
                continue
            cost = float(np.sum((features - centers[labels]) ** 2))
            if cost < best_cost:
                best, best_cost = labels, cost
        if best is not None:
            logger.info(
                f"k-means: cluster sizes {np.bincount(best, minlength=G).tolist()}"
            )
            return best.astype(int)
        logger.warning(f"k-means attempt {attempt} produced empty clusters, retrying")
    raise CokrigingError.empty_cluster(KMEANS_ATTEMPTS)


def functional_pca(
    coefs: np.ndarray, gram: np.ndarray, n_components: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    L2 functional PCA of curves given by spline coefficients.

    Args:
        coefs: (m, dim) centered coefficient vectors
        gram: dim x dim Gram matrix of the (block) basis
        n_components: Components to keep

    Returns:
        (loadings dim x q with loadings' gram loadings = I, scores m x q,
        variances q), variances in decreasing order
    """
    dim = gram.shape[0]
    if n_components == 0:
        return np.zeros((dim, 0)), np.zeros((len(coefs), 0)), np.zeros(0)
    lower = linalg.cholesky(gram, lower=True)
    rotated = coefs @ lower
    cov = rotated.T @ rotated / max(len(coefs), 1)
    vals, vecs = linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(vals)[::-1][:n_components]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    loadings = linalg.solve_triangular(lower.T, vecs, lower=False)
    scores = rotated @ vecs
    for col in range(n_components):
        nonzero = np.flatnonzero(np.abs(loadings[:, col]) > 1e-12)
        if len(nonzero) and loadings[nonzero[0], col] < 0:
            loadings[:, col] *= -1.0
            scores[:, col] *= -1.0
    return loadings, scores, vals


def _smooth(B: np.ndarray, resid: np.ndarray, penalty: np.ndarray, lam: float):
    lhs = B.T @ B + lam * penalty
    lhs += 1e-8 * max(float(np.trace(lhs)), 1.0) * np.eye(len(lhs))
    return linalg.solve(lhs, B.T @ resid, assume_a="pos")


def _cluster_start(
    members: np.ndarray,
    prepared: list[PreparedProfile],
    basis: BasisSystem,
    config: FitConfig,
    K: int,
    kernel_template: KernelParams,
) -> tuple[ClusterParams, float, int, np.ndarray, np.ndarray]:
    """
    Independent-model parameters of one cluster.

    Returns:
        (cluster, response rss, response count, per-channel predictor rss,
        per-channel counts) of the smoothing residuals
    """
    n_basis, q1, q2 = basis.P, config.n_predictor_pcs, config.n_residual_pcs
    penalties = config.penalties
    weight = np.zeros(len(prepared))
    weight[members] = 1.0
    n_scores = q1 + q2
    mom = ClusterMoments(
        weight,
        np.zeros((len(prepared), n_scores)),
        np.zeros((len(prepared), n_scores, n_scores)),
        q1,
    )
    n_seasonal = 2 * config.n_harmonics + 1

    rows_y = response_rows(prepared, weight)
    upsilon_y = np.zeros((n_basis, n_seasonal))
    if rows_y:
        upsilon_y = seasonal_mean(
            rows_y, mom, np.zeros((n_basis, n_scores)), prepared, 1.0,
            basis.penalty, penalties.mean_y,
        )[0]
    upsilon_x = np.zeros((K * n_basis, n_seasonal))
    x_coefs = np.zeros((len(prepared), K * n_basis))
    has_x = np.zeros(len(prepared), dtype=bool)
    rss_x, count_x = np.zeros(K), np.zeros(K)
    for k in range(K):
        block = slice(k * n_basis, (k + 1) * n_basis)
        rows = channel_rows(prepared, weight, k)
        if not rows:
            continue
        upsilon_x[block] = seasonal_mean(
            rows, mom, np.zeros((n_basis, n_scores)), prepared, 1.0,
            basis.penalty, penalties.mean_x,
        )[0]
        for i, values, B in rows:
            resid = values - B @ (upsilon_x[block] @ prepared[i].delta)
            x_coefs[i, block] = _smooth(B, resid, basis.penalty, penalties.theta_x)
            rss_x[k] += float(np.sum((resid - B @ x_coefs[i, block]) ** 2))
            count_x[k] += len(values)
            has_x[i] = True

    y_coefs = np.zeros((len(prepared), n_basis))
    has_y = np.zeros(len(prepared), dtype=bool)
    rss_y, count_y = 0.0, 0
    for i, values, B in rows_y:
        resid = values - B @ (upsilon_y @ prepared[i].delta)
        y_coefs[i] = _smooth(B, resid, basis.penalty, penalties.theta_e)
        rss_y += float(np.sum((resid - B @ y_coefs[i]) ** 2))
        count_y += len(values)
        has_y[i] = True

    x_index = np.flatnonzero(has_x)
    theta_x, alpha, var_alpha = functional_pca(
        x_coefs[x_index], np.kron(np.eye(K), basis.gram), q1
    ) if K else (np.zeros((0, q1)), np.zeros((0, q1)), np.zeros(q1))

    y_index = np.flatnonzero(has_y)
    n_tilde = min(n_basis, q1 + q2)
    theta_y, beta, var_beta = functional_pca(y_coefs[y_index], basis.gram, n_tilde)

    # cross-covariance of response and predictor scores on profiles with both
    both = np.intersect1d(y_index, x_index)
    cross = np.zeros((n_tilde, q1))
    if len(both) >= 2 and q1:
        b = beta[np.searchsorted(y_index, both)]
        a = alpha[np.searchsorted(x_index, both)]
        cross = (b.T @ a / len(both)) / np.maximum(var_alpha, VARIANCE_FLOOR)[None, :]
    lam = theta_y @ cross

    remaining = np.diag(var_beta) - cross @ np.diag(var_alpha) @ cross.T
    vals, vecs = linalg.eigh(0.5 * (remaining + remaining.T))
    order = np.argsort(vals)[::-1][:q2]
    var_eta = np.clip(vals[order], VARIANCE_FLOOR, None)
    theta_e = theta_y @ vecs[:, order]
    for col in range(q2):
        nonzero = np.flatnonzero(np.abs(theta_e[:, col]) > 1e-12)
        if len(nonzero) and theta_e[nonzero[0], col] < 0:
            theta_e[:, col] *= -1.0

    var_alpha = np.clip(var_alpha, VARIANCE_FLOOR, None)
    if len(var_alpha) < q1:
        var_alpha = np.concatenate([var_alpha, np.ones(q1 - len(var_alpha))])
    cluster = ClusterParams(
        upsilon_y=upsilon_y,
        upsilon_x=upsilon_x,
        theta_x=theta_x,
        theta_e=theta_e,
        lam=lam,
        alpha_kernels=[kernel_template.with_variance(v) for v in var_alpha],
        eta_kernels=[kernel_template.with_variance(v) for v in var_eta],
    )
    return cluster, rss_y, count_y, rss_x, count_x


def _kernel_template(sites: SpaceTimeSites, config: FitConfig) -> KernelParams:
    span = float(np.ptp(sites.times)) if len(sites) else 0.0
    return KernelParams(
        variance=1.0,
        range_x=config.kernel.range_fraction * domain_diameter(sites),
        range_t=config.kernel.range_fraction * span if span > 0 else 1.0,
        smoothness=config.kernel.smoothness,
        kind=config.kernel.kind,
    )


def _check_dimensions(prepared: list[PreparedProfile], basis: BasisSystem, config, K):
    if config.n_predictor_pcs and K == 0:
        raise CokrigingError.invalid_config(
            "n_predictor_pcs", "predictor components require predictor channels"
        )
    if config.n_predictor_pcs > K * basis.P:
        raise CokrigingError.invalid_config(
            "n_predictor_pcs", f"at most {K * basis.P} components are identifiable"
        )
    if config.n_residual_pcs > basis.P:
        raise CokrigingError.invalid_config(
            "n_residual_pcs", f"at most {basis.P} components are identifiable"
        )
    with_response = sum(p.has_response for p in prepared)
    if with_response < config.n_clusters:
        raise CokrigingError.invalid_config(
            "n_clusters",
            f"{config.n_clusters} clusters need at least as many profiles with "
            f"response data, found {with_response}",
        )


def independent_samples(
    prepared: list[PreparedProfile],
    sites: SpaceTimeSites,
    omega: ModelParams,
    config: FitConfig,
    rng: np.random.Generator,
) -> list[LatentSample]:
    """Equally weighted draws from the spatially independent mixture posterior."""
    table = loglik_table(prepared, omega)
    probs = softmax(table, axis=1)
    cumulative = np.cumsum(probs, axis=1)
    options = config.solver.to_options()
    n_samples = config.mc_samples
    samples = []
    for _ in range(n_samples):
        u = rng.random(len(prepared))
        z = np.minimum((u[:, None] > cumulative).sum(axis=1), omega.G - 1)
        posteriors = conditional_scores(
            prepared, sites, z, omega, options,
            independent=True, compute_loglik=False,
        )
        alpha, eta = assemble_scores(posteriors, [p.sample(rng) for p in posteriors], z)
        samples.append(
            LatentSample(z=z, alpha=alpha, eta=eta, norm_weight=1.0 / n_samples)
        )
    return samples


def initialize(
    profiles: list[Profile],
    prepared: list[PreparedProfile],
    sites: SpaceTimeSites,
    basis: BasisSystem,
    config: FitConfig,
    rng: np.random.Generator,
) -> InitResult:
    """
    Starting parameters and labels.

    Args:
        profiles: Raw profiles (for the interpolated k-means features)
        prepared: The same profiles with basis evaluations
        sites: Profile sites
        basis: Spline basis
        config: Fit settings
        rng: Random generator

    Returns:
        InitResult with starting parameters and k-means labels

    Raises:
        CokrigingError: On impossible dimensions or repeatedly empty clusters
    """
    K = len(prepared[0].x) if prepared else 0
    _check_dimensions(prepared, basis, config, K)
    G = config.n_clusters

    features = interpolation_features(profiles, basis, config.init.grid_points)
    labels = kmeans_labels(features, G, config.init.kmeans_restarts, rng)

    template = _kernel_template(sites, config)
    clusters, rss_y, n_y = [], 0.0, 0
    rss_x, n_x = np.zeros(K), np.zeros(K)
    for g in range(G):
        cluster, ry, cy, rx, cx = _cluster_start(
            np.flatnonzero(labels == g), prepared, basis, config, K, template
        )
        clusters.append(cluster)
        rss_y, n_y = rss_y + ry, n_y + cy
        rss_x, n_x = rss_x + rx, n_x + cx

    spread_y = np.var(np.concatenate([p.y for p in prepared])) if n_y else 1.0
    sigma2_y = max(rss_y / n_y if n_y else 1.0, 1e-6 * spread_y, VARIANCE_FLOOR)
    sigma2_x = np.maximum(np.where(n_x > 0, rss_x / np.maximum(n_x, 1), 1.0), VARIANCE_FLOOR)

    omega = ModelParams(
        G=G,
        Q1=config.n_predictor_pcs,
        Q2=config.n_residual_pcs,
        R=config.n_harmonics,
        K=K,
        clusters=clusters,
        sigma2_y=float(sigma2_y),
        sigma2_x=sigma2_x,
        xi=config.init.xi,
        penalties=config.penalties.to_penalties(),
    )

    return InitResult(omega=omega, labels=labels)


def independent_iteration(
    prepared: list[PreparedProfile],
    sites: SpaceTimeSites,
    omega: ModelParams,
    basis: BasisSystem,
    config: FitConfig,
    rng: np.random.Generator,
) -> tuple[ModelParams, list[LatentSample]]:
    """One EM iteration of the spatially independent mixture."""
    samples = independent_samples(prepared, sites, omega, config, rng)
    omega = m_step(
        prepared, sites, samples, omega, basis, None, config,
        independent=True, update_xi=False,
    ).omega
    return omega, samples
