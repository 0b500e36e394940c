"""
Functional cokriging of response curves at new space-time sites.

Targets enter the model as profiles without response data: their predictor
measurements, when present, add information rows, and their labels and scores
are sampled jointly with those of the training profiles over the extended
neighbor graph. Predictions mix the per-sample conditional means with the
importance weights; the prediction variance splits into a score part and a
cluster-assignment part by the law of total variance.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from cokriging.config import FitConfig
from cokriging.em.engine import FitState
from cokriging.errors import CokrigingError
from cokriging.model.likelihood import (
    FactorCache,
    cluster_terms,
    conditional_scores,
    loglik_table,
    normalize_log_weights,
)
from cokriging.model.types import Profile, prepare_profiles, profile_sites
from cokriging.mrf.potts import build_graph, sample_fields
from cokriging.predict.bands import simultaneous_band
from cokriging.spatial.covariance import SpaceTimeSites
from cokriging.splines.basis import evaluate

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class PredictionResult:
    """
    Prediction of the response curve at one target.

    Attributes:
        profile_id: Target identifier
        pressures: Evaluation grid
        cluster_probs: (G,) weighted label frequencies at the target
        mean_coef: (P,) spline coefficients of the predicted curve
        mean: Predicted curve on the grid
        var_scores: Expected conditional variance given the labels
        var_cluster: Variance of the conditional means across label draws
        band_radius: Simultaneous band multiplier of the dominant cluster, if any
        cluster_band_radii: Per-cluster multipliers when no cluster dominates
        cluster_means: Per-cluster predicted curves (clusters with positive probability)
        cluster_sds: Their standard deviations
        extrapolated: Target outside the spatial or temporal range of the data
    """

    profile_id: str
    pressures: np.ndarray
    cluster_probs: np.ndarray
    mean_coef: np.ndarray
    mean: np.ndarray
    var_scores: np.ndarray
    var_cluster: np.ndarray
    band_radius: Optional[float] = None
    cluster_band_radii: dict[int, float] = field(default_factory=dict)
    cluster_means: dict[int, np.ndarray] = field(default_factory=dict)
    cluster_sds: dict[int, np.ndarray] = field(default_factory=dict)
    extrapolated: bool = False

    @property
    def total_var(self) -> np.ndarray:
        return self.var_scores + self.var_cluster

    @property
    def sd_total(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.total_var, 0.0))


def variance_decomposition(
    means: np.ndarray, variances: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """
    Law-of-total-variance split of a weighted mixture.

    Args:
        means: (T, ...) conditional means per sample
        variances: (T, ...) conditional variances per sample
        weights: (T,) normalized weights

    Returns:
        (var_scores, var_cluster): weighted mean of the conditional variances and
        weighted variance of the conditional means
    """
    weights = np.asarray(weights, dtype=float)
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    mixed = np.tensordot(weights, means, axes=1)
    var_scores = np.tensordot(weights, variances, axes=1)
    var_cluster = np.tensordot(weights, (means - mixed) ** 2, axes=1)
    return var_scores, var_cluster


def _extrapolated(training: SpaceTimeSites, targets: SpaceTimeSites) -> np.ndarray:
    if len(training) == 0:
        return np.ones(len(targets), dtype=bool)
    lo, hi = training.coords.min(axis=0), training.coords.max(axis=0)
    outside = np.any((targets.coords < lo) | (targets.coords > hi), axis=1)
    t_lo, t_hi = training.times.min(), training.times.max()
    return outside | (targets.times < t_lo) | (targets.times > t_hi)


@dataclass(eq=False)
class _SampleSummary:
    log_weight: float
    labels: np.ndarray
    coef: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    score_means: np.ndarray
    score_covs: np.ndarray


def predict(
    targets: list[Profile],
    state: FitState,
    fit_config: FitConfig,
    pressures: np.ndarray,
    rng: np.random.Generator,
    mc_samples: Optional[int] = None,
    band_level: float = 0.95,
    band_sims: int = 1000,
    dominant_threshold: float = 0.99,
) -> list[PredictionResult]:
    """
    Predict response curves at target sites.

    Args:
        targets: Target profiles (response values are ignored; predictor
            channels, if present, are conditioned on)
        state: Fitted model
        fit_config: Settings the model was fitted with
        pressures: Evaluation grid of the curves
        rng: Random generator
        mc_samples: Monte Carlo samples (default: the fit setting)
        band_level: Coverage of the simultaneous bands
        band_sims: Simulated curves per band
        dominant_threshold: Cluster probability above which one band is reported

    Returns:
        One PredictionResult per target, in input order

    Raises:
        CokrigingError: If a pressure or a target's measurements lie outside
            the basis domain, or on numerical failure
    """
    omega, basis = state.omega, state.basis
    pressures = np.asarray(pressures, dtype=float)
    if not basis.contains(pressures):
        raise CokrigingError.invalid_config(
            "pressure",
            f"prediction pressures must lie in [{basis.domain_lo}, {basis.domain_hi}]",
        )
    n_obs, n_targets = len(state.profiles), len(targets)
    if n_targets == 0:
        return []

    all_profiles = list(state.profiles) + [t.without_response() for t in targets]
    try:
        prepared = prepare_profiles(all_profiles, basis, omega.R, omega.K)
        sites = profile_sites(all_profiles, fit_config.coordinate_mode)
    except ValueError as e:
        raise CokrigingError.out_of_domain("prediction targets", str(e)) from e

    target_index = n_obs + np.arange(n_targets)
    flags = _extrapolated(sites.subset(np.arange(n_obs)), sites.subset(target_index))
    if flags.any():
        logger.warning(
            f"{int(flags.sum())} of {n_targets} targets lie outside the data range"
        )

    k = min(fit_config.graph.k, len(sites) - 1)
    graph = build_graph(
        sites, k, fit_config.graph.distance_weights, fit_config.graph.weighting
    )
    options = fit_config.solver.to_options()
    terms = cluster_terms(prepared, omega)
    table = loglik_table(prepared, omega, terms)
    n_samples = mc_samples or fit_config.mc_samples

    z0 = np.concatenate([np.asarray(state.labels, dtype=int), np.zeros(n_targets, dtype=int)])
    if omega.G == 1:
        fields = [np.zeros(len(prepared), dtype=int)] * n_samples
    else:
        fields = sample_fields(
            z0, omega.xi, graph, omega.G, n_samples,
            fit_config.gibbs_burn_in, fit_config.gibbs_thin, rng, table,
        )
    seeds = np.random.SeedSequence(int(rng.integers(2**63))).spawn(n_samples)
    grid_basis = evaluate(basis, pressures).reshape(-1, basis.P)
    cache = FactorCache(sites, options)
    rows = np.arange(len(prepared))
    q = omega.n_scores

    def summarize(args) -> _SampleSummary:
        z, seed = args
        local = np.random.default_rng(seed)
        posteriors = conditional_scores(
            prepared, sites, z, omega, options, terms, cache, rng=local
        )
        loglik = float(sum(p.loglik for p in posteriors))
        labels = z[target_index]
        coef = np.zeros((n_targets, basis.P))
        score_means = np.zeros((n_targets, q))
        score_covs = np.zeros((n_targets, q, q))
        means = np.zeros((n_targets, len(pressures)))
        variances = np.zeros((n_targets, len(pressures)))
        for g, post in enumerate(posteriors):
            members = np.flatnonzero(labels == g)
            if len(members) == 0:
                continue
            cluster = omega.clusters[g]
            loadings = np.hstack([cluster.lam, cluster.theta_e])
            positions = np.searchsorted(post.site_index, target_index[members])
            if q:
                alpha, eta = post.split(post.mean)
                score_means[members] = np.hstack([alpha, eta])[positions]
                score_covs[members] = post.site_covariances(positions)
            curve_map = grid_basis @ loadings
            for j in members:
                delta = prepared[target_index[j]].delta
                coef[j] = cluster.upsilon_y @ delta + loadings @ score_means[j]
                variances[j] = np.einsum(
                    "mq,qr,mr->m", curve_map, score_covs[j], curve_map
                )
            means[members] = coef[members] @ grid_basis.T
        return _SampleSummary(
            log_weight=loglik - float(table[rows, z].sum()),
            labels=labels,
            coef=coef,
            means=means,
            variances=variances,
            score_means=score_means,
            score_covs=score_covs,
        )

    with ThreadPoolExecutor(max_workers=fit_config.n_threads) as pool:
        summaries = list(pool.map(summarize, zip(fields, seeds)))

    weights, ess = normalize_log_weights(np.array([s.log_weight for s in summaries]))
    logger.info(f"Prediction: {n_samples} samples, effective sample size {ess:.1f}")

    labels = np.stack([s.labels for s in summaries])
    coefs = np.stack([s.coef for s in summaries])
    means = np.stack([s.means for s in summaries])
    variances = np.stack([s.variances for s in summaries])
    score_means = np.stack([s.score_means for s in summaries])
    score_covs = np.stack([s.score_covs for s in summaries])

    band_rng = np.random.default_rng(
        np.random.SeedSequence(int(rng.integers(2**63)))
    )
    results = []
    for j, target in enumerate(targets):
        probs = np.bincount(labels[:, j], weights=weights, minlength=omega.G)
        var_scores, var_cluster = variance_decomposition(
            means[:, j], variances[:, j], weights
        )
        result = PredictionResult(
            profile_id=target.profile_id,
            pressures=pressures,
            cluster_probs=probs,
            mean_coef=weights @ coefs[:, j],
            mean=weights @ means[:, j],
            var_scores=var_scores,
            var_cluster=var_cluster,
            extrapolated=bool(flags[j]),
        )
        for g in np.flatnonzero(probs > 0):
            in_g = labels[:, j] == g
            w = weights[in_g] / weights[in_g].sum()
            mean_g = w @ means[in_g, j]
            var_s, var_c = variance_decomposition(means[in_g, j], variances[in_g, j], w)
            result.cluster_means[int(g)] = mean_g
            result.cluster_sds[int(g)] = np.sqrt(np.maximum(var_s + var_c, 0.0))
            if q == 0:
                continue
            # total score covariance within cluster g across samples
            s_mean = w @ score_means[in_g, j]
            centered = score_means[in_g, j] - s_mean
            cov = np.tensordot(w, score_covs[in_g, j], axes=1) + (centered.T * w) @ centered
            cluster = omega.clusters[g]
            curve_map = grid_basis @ np.hstack([cluster.lam, cluster.theta_e])
            radius = simultaneous_band(cov, curve_map, band_level, band_sims, band_rng)
            if probs[g] >= dominant_threshold:
                result.band_radius = radius
            else:
                result.cluster_band_radii[int(g)] = radius
        results.append(result)
    return results
