"""
Maximization step of the Monte Carlo EM algorithm.

All updates are driven by importance-weighted moments of the sampled scores.
For cluster g and profile i, with weights w of the Monte Carlo samples:

    weight[i]    = sum_t w_t 1(z_ti = g)
    first[i]     = sum_t w_t 1(z_ti = g) s_ti
    second[i]    = sum_t w_t 1(z_ti = g) s_ti s_ti'

where s = (alpha, eta). Spline blocks are updated one after another, each as
the exact maximizer of the penalized complete-data log-likelihood given the
others; data terms are scaled by the noise variances and penalties enter as
0.5 * lambda * theta' Omega theta.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.optimize import minimize

from cokriging.config import FitConfig
from cokriging.errors import CokrigingError
from cokriging.model.likelihood import LOG_2PI, SolverOptions
from cokriging.model.types import (
    ClusterParams,
    LatentSample,
    ModelParams,
    PreparedProfile,
)
from cokriging.mrf.potts import NeighborGraph, xi_update
from cokriging.spatial.covariance import KernelParams, SpaceTimeSites, domain_diameter
from cokriging.spatial.sparse_gp import vecchia_factor_from_structure, vecchia_structure
from cokriging.splines.basis import BasisSystem, orthonormalize as orthonormalize_blocks

logger = logging.getLogger(__name__)

NOISE_FLOOR = 1e-12
SCORE_VARIANCE_FLOOR = 1e-10
RIDGE = 1e-10
FAILED_OBJECTIVE = 1e300
# allowed decrease of the M-step objective, in MC standard errors
OBJECTIVE_SLACK = 3.0
# rounding allowance per measurement
OBJECTIVE_ROUNDING = 1e-8


@dataclass(eq=False)
class ClusterMoments:
    """Importance-weighted score moments of one cluster, per profile."""

    weight: np.ndarray
    first: np.ndarray
    second: np.ndarray
    Q1: int

    @property
    def total(self) -> float:
        return float(self.weight.sum())

    @property
    def a1(self) -> np.ndarray:
        return self.first[:, : self.Q1]

    @property
    def e1(self) -> np.ndarray:
        return self.first[:, self.Q1 :]

    @property
    def aa(self) -> np.ndarray:
        return self.second[:, : self.Q1, : self.Q1]

    @property
    def ae(self) -> np.ndarray:
        return self.second[:, : self.Q1, self.Q1 :]

    @property
    def ee(self) -> np.ndarray:
        return self.second[:, self.Q1 :, self.Q1 :]

    def subset(self, index: np.ndarray) -> "ClusterMoments":
        return ClusterMoments(
            self.weight[index], self.first[index], self.second[index], self.Q1
        )


@dataclass(frozen=True, eq=False)
class NormalEquation:
    """
    Data and penalty parts of one penalized least-squares solve.

    trace((information + penalty)^-1 information) is the effective number of
    parameters of the block.
    """

    cluster: int
    block: str
    information: np.ndarray
    penalty: np.ndarray

    def effective_dof(self) -> float:
        lhs = self.information + self.penalty
        try:
            return float(np.trace(linalg.solve(lhs, self.information, assume_a="sym")))
        except linalg.LinAlgError:
            return float(np.trace(np.linalg.pinv(lhs) @ self.information))


@dataclass(eq=False)
class MStepResult:
    """
    Attributes:
        omega: Updated parameters
        normal_equations: Normal equations of the spline updates
        objective_gain: Change of the penalized complete-data log-likelihood over
            the updates that precede orthonormalization
        objective_se: Monte Carlo standard error of that change
    """

    omega: ModelParams
    normal_equations: list[NormalEquation]
    objective_gain: float = 0.0
    objective_se: float = 0.0


def _stack_scores(samples: list[LatentSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    labels = np.stack([np.asarray(s.z, dtype=int) for s in samples])
    weights = np.array([s.norm_weight for s in samples], dtype=float)
    scores = np.stack([np.hstack([s.alpha, s.eta]) for s in samples])
    return labels, weights, scores


def cluster_moments(
    samples: list[LatentSample], G: int, Q1: int, Q2: int
) -> list[ClusterMoments]:
    """Weighted zeroth, first and second score moments for every cluster."""
    if not samples:
        raise ValueError("Need at least one Monte Carlo sample")
    labels, weights, scores = _stack_scores(samples)
    scores = scores.reshape(len(samples), labels.shape[1], Q1 + Q2)
    moments = []
    for g in range(G):
        member = (labels == g) * weights[:, None]
        moments.append(
            ClusterMoments(
                weight=member.sum(axis=0),
                first=np.einsum("tn,tnq->nq", member, scores),
                second=np.einsum("tn,tnq,tnr->nqr", member, scores, scores),
                Q1=Q1,
            )
        )
    return moments


def _solve_normal(lhs: np.ndarray, rhs: np.ndarray, label: str) -> np.ndarray:
    lhs = 0.5 * (lhs + lhs.T)
    try:
        return linalg.cho_solve(linalg.cho_factor(lhs), rhs)
    except linalg.LinAlgError:
        pass
    scale = float(np.trace(lhs))
    ridge = RIDGE * scale if scale > 0 else RIDGE
    logger.warning(f"Singular normal equations for {label}; adding ridge {ridge:.3e}")
    try:
        return linalg.solve(lhs + ridge * np.eye(len(lhs)), rhs, assume_a="sym")
    except linalg.LinAlgError as e:
        raise CokrigingError.numeric_failure(
            f"normal equations for {label}", details=str(e)
        ) from e


@dataclass(frozen=True, eq=False)
class _ChannelStats:
    """Cross products of one channel's basis rows with the mean-removed data."""

    index: np.ndarray
    BtB: np.ndarray
    Btr: np.ndarray
    rr: np.ndarray
    n: np.ndarray


def _channel_stats(
    rows: list[tuple[int, np.ndarray, np.ndarray]], upsilon: np.ndarray, prepared
) -> _ChannelStats:
    n_basis = upsilon.shape[0]
    if not rows:
        return _ChannelStats(
            np.zeros(0, dtype=int),
            np.zeros((0, n_basis, n_basis)),
            np.zeros((0, n_basis)),
            np.zeros(0),
            np.zeros(0),
        )
    BtB, Btr, rr, n = [], [], [], []
    for i, values, B in rows:
        resid = values - B @ (upsilon @ prepared[i].delta)
        BtB.append(B.T @ B)
        Btr.append(B.T @ resid)
        rr.append(float(resid @ resid))
        n.append(len(values))
    return _ChannelStats(
        np.array([i for i, _, _ in rows], dtype=int),
        np.stack(BtB),
        np.stack(Btr),
        np.array(rr),
        np.array(n, dtype=float),
    )


def response_rows(prepared, weight):
    """(index, values, basis rows) of profiles with response data and positive weight."""
    return [
        (i, p.y, p.B_y)
        for i, p in enumerate(prepared)
        if p.has_response and weight[i] > 0
    ]


def channel_rows(prepared, weight, k):
    """(index, values, basis rows) of profiles measuring predictor channel k."""
    return [
        (i, p.x[k], p.B_x[k])
        for i, p in enumerate(prepared)
        if len(p.x[k]) and weight[i] > 0
    ]


def seasonal_mean(
    rows, mom: ClusterMoments, loadings: np.ndarray,
    prepared, noise_var: float, penalty: np.ndarray, lam: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seasonal-mean coefficients (P x D) of one channel given the loadings."""
    n_basis = penalty.shape[0]
    n_seasonal = len(prepared[0].delta)
    info = np.zeros((n_basis * n_seasonal, n_basis * n_seasonal))
    rhs = np.zeros(n_basis * n_seasonal)
    for i, values, B in rows:
        delta = prepared[i].delta
        c = mom.weight[i]
        info += c * np.kron(B.T @ B, np.outer(delta, delta)) / noise_var
        fitted = B @ (loadings @ mom.first[i])
        rhs += np.kron(B.T @ (c * values - fitted), delta) / noise_var
    pen = lam * np.kron(penalty, np.eye(n_seasonal))
    coef = _solve_normal(info + pen, rhs, "seasonal mean")
    return coef.reshape(n_basis, n_seasonal), info, pen


def _update_columns(
    loadings: np.ndarray,
    stats: _ChannelStats,
    m1: np.ndarray,
    m2: np.ndarray,
    fixed: Optional[list[np.ndarray]],
    noise_var: float,
    pen: np.ndarray,
    label: str,
    records: list,
    g: int,
) -> np.ndarray:
    """
    Sequential column updates of a loading matrix.

    Args:
        loadings: P x L matrix being updated
        stats: Channel cross products
        m1: (m, L) first moments of the scores multiplying the loadings
        m2: (m, L, L) second moments among those scores
        fixed: Per column, the (P, m) contribution of the other loading block
            through the cross moments, or None
        noise_var: Noise variance of the channel
        pen: lambda * penalty matrix
    """
    loadings = loadings.copy()
    for l in range(loadings.shape[1]):
        info = np.einsum("m,mpq->pq", m2[:, l, l], stats.BtB) / noise_var
        others = loadings @ m2[:, l, :].T - loadings[:, [l]] * m2[:, l, l][None, :]
        if fixed is not None:
            others = others + fixed[l]
        rhs = (
            stats.Btr.T @ m1[:, l] - np.einsum("mpq,qm->p", stats.BtB, others)
        ) / noise_var
        loadings[:, l] = _solve_normal(info + pen, rhs, f"{label} column {l + 1}")
        records.append(NormalEquation(g, f"{label}_{l + 1}", info, pen))
    return loadings


def _update_cluster_splines(
    g: int,
    cluster: ClusterParams,
    mom: ClusterMoments,
    prepared: list[PreparedProfile],
    omega: ModelParams,
    basis: BasisSystem,
    records: list,
) -> ClusterParams:
    cluster = cluster.copy()
    pen = basis.penalty
    lam = omega.penalties
    q1 = omega.Q1
    n_basis = basis.P

    rows = response_rows(prepared, mom.weight)
    if rows:
        coef, info, pen_mat = seasonal_mean(
            rows, mom, np.hstack([cluster.lam, cluster.theta_e]),
            prepared, omega.sigma2_y, pen, lam.mean_y,
        )
        cluster.upsilon_y = coef
        records.append(NormalEquation(g, "mean_y", info, pen_mat))

        stats = _channel_stats(rows, cluster.upsilon_y, prepared)
        sub = mom.subset(stats.index)
        # cross terms of the residual loadings on the predictor-score columns
        fixed_lam = [cluster.theta_e @ sub.ae[:, l, :].T for l in range(q1)]
        cluster.lam = _update_columns(
            cluster.lam, stats, sub.a1, sub.aa, fixed_lam,
            omega.sigma2_y, lam.lam * pen, "lambda", records, g,
        )
        fixed_e = [cluster.lam @ sub.ae[:, :, l].T for l in range(omega.Q2)]
        cluster.theta_e = _update_columns(
            cluster.theta_e, stats, sub.e1, sub.ee, fixed_e,
            omega.sigma2_y, lam.theta_e * pen, "theta_e", records, g,
        )

    for k in range(omega.K):
        block = slice(k * n_basis, (k + 1) * n_basis)
        rows = channel_rows(prepared, mom.weight, k)
        if not rows:
            continue
        loadings = np.zeros((n_basis, omega.n_scores))
        loadings[:, :q1] = cluster.theta_x[block]
        coef, info, pen_mat = seasonal_mean(
            rows, mom, loadings, prepared,
            omega.sigma2_x[k], pen, lam.mean_x,
        )
        cluster.upsilon_x[block] = coef
        records.append(NormalEquation(g, f"mean_x{k + 1}", info, pen_mat))

        stats = _channel_stats(rows, cluster.upsilon_x[block], prepared)
        sub = mom.subset(stats.index)
        cluster.theta_x[block] = _update_columns(
            cluster.theta_x[block], stats, sub.a1, sub.aa, None,
            omega.sigma2_x[k], lam.theta_x * pen, f"theta_x{k + 1}", records, g,
        )
    return cluster


def _expected_rss(stats: _ChannelStats, loadings: np.ndarray, mom: ClusterMoments, cols) -> float:
    """E sum_i ||r_i - B_i W s_i||^2 weighted by cluster membership."""
    if len(stats.index) == 0:
        return 0.0
    sub = mom.subset(stats.index)
    first = sub.first[:, cols]
    second = sub.second[:, cols, cols]
    proj = np.einsum("mp,pq->mq", stats.Btr, loadings)
    gram = np.einsum("pa,mpq,qb->mab", loadings, stats.BtB, loadings)
    return float(
        np.sum(sub.weight * stats.rr)
        - 2.0 * np.sum(proj * first)
        + np.einsum("mab,mab->", gram, second)
    )


def update_noise(
    prepared: list[PreparedProfile],
    omega: ModelParams,
    moments: list[ClusterMoments],
    basis: BasisSystem,
) -> tuple[float, np.ndarray]:
    """Closed-form response and per-channel measurement-error variances."""
    q1, n_basis = omega.Q1, basis.P
    n_y = sum(len(p.y) for p in prepared)
    rss_y = 0.0
    rss_x = np.zeros(omega.K)
    n_x = np.array([sum(len(p.x[k]) for p in prepared) for k in range(omega.K)])
    for cluster, mom in zip(omega.clusters, moments):
        rows = response_rows(prepared, mom.weight)
        stats = _channel_stats(rows, cluster.upsilon_y, prepared)
        rss_y += _expected_rss(
            stats, np.hstack([cluster.lam, cluster.theta_e]), mom, slice(None)
        )
        for k in range(omega.K):
            block = slice(k * n_basis, (k + 1) * n_basis)
            rows = channel_rows(prepared, mom.weight, k)
            stats = _channel_stats(rows, cluster.upsilon_x[block], prepared)
            rss_x[k] += _expected_rss(stats, cluster.theta_x[block], mom, slice(0, q1))

    sigma2_y = max(rss_y / n_y, NOISE_FLOOR) if n_y else omega.sigma2_y
    sigma2_x = np.where(
        n_x > 0, np.maximum(rss_x / np.maximum(n_x, 1), NOISE_FLOOR), omega.sigma2_x
    )
    return float(sigma2_y), sigma2_x


@dataclass(eq=False)
class FieldGroup:
    """Sampled score fields sharing one site subset."""

    index: np.ndarray
    weights: np.ndarray
    values: np.ndarray

    @property
    def size(self) -> float:
        return float(self.weights.sum()) * len(self.index)


def field_groups(samples: list[LatentSample], g: int) -> list[FieldGroup]:
    """Group the score fields of cluster g by the set of sites it covers."""
    groups: dict[bytes, list] = {}
    for sample in samples:
        index = np.flatnonzero(np.asarray(sample.z) == g)
        if len(index) == 0 or sample.norm_weight <= 0:
            continue
        scores = np.hstack([sample.alpha, sample.eta])[index]
        entry = groups.setdefault(index.tobytes(), [index, [], []])
        entry[1].append(sample.norm_weight)
        entry[2].append(scores)
    return [
        FieldGroup(index, np.array(weights), np.stack(values, axis=1))
        for index, weights, values in groups.values()
    ]


class KernelSearchSpace:
    """Log-range, smoothness and deformation coordinates searched for a kernel."""

    def __init__(
        self,
        params: KernelParams,
        config: FitConfig,
        diameter: float,
        time_span: float,
    ):
        self.base = params.with_variance(1.0)
        self.fit_time = time_span > 0
        self.fit_smoothness = (
            config.kernel.estimate_smoothness and params.kind == "matern"
        )
        self.fit_deform = (
            config.kernel.estimate_deformation and config.coordinate_mode == "sphere"
        )
        bounds = [(np.log(1e-3 * diameter), np.log(10.0 * diameter))]
        if self.fit_time:
            bounds.append((np.log(1e-3 * time_span), np.log(10.0 * time_span)))
        if self.fit_smoothness:
            bounds.append(tuple(config.kernel.smoothness_bounds))
        if self.fit_deform:
            b = config.kernel.deformation_bound
            bounds.extend([(-b, b)] * 5)
        self.bounds = bounds

    def encode(self, params: KernelParams) -> np.ndarray:
        x = [np.log(params.range_x)]
        if self.fit_time:
            x.append(np.log(params.range_t))
        if self.fit_smoothness:
            x.append(params.smoothness)
        if self.fit_deform:
            x.extend(params.deform_weights)
        lo, hi = np.array(self.bounds).T
        return np.clip(np.array(x, dtype=float), lo, hi)

    def decode(self, x: np.ndarray) -> KernelParams:
        changes = {"range_x": float(np.exp(x[0]))}
        pos = 1
        if self.fit_time:
            changes["range_t"] = float(np.exp(x[pos]))
            pos += 1
        if self.fit_smoothness:
            changes["smoothness"] = float(x[pos])
            pos += 1
        if self.fit_deform:
            changes["deform_weights"] = tuple(float(v) for v in x[pos : pos + 5])
        return replace(self.base, **changes)


def update_kernel(
    params: KernelParams,
    groups: list[FieldGroup],
    component: int,
    sites: SpaceTimeSites,
    config: FitConfig,
    independent: bool = False,
) -> KernelParams:
    """
    Re-estimate one score-field kernel from sampled fields.

    The marginal variance is profiled out in closed form. With spatial
    dependence the remaining parameters maximize the weighted Vecchia
    log-likelihood by bounded Nelder-Mead, conditioning sets held at those of
    the current parameters; a candidate is kept only if it improves the
    objective.

    Returns:
        Updated kernel (the input if no sampled field covers the cluster)
    """
    total_n = sum(group.size for group in groups)
    if total_n <= 0:
        return params
    columns = [group.values[:, :, component] for group in groups]

    if independent:
        total_q = sum(
            float(group.weights @ np.sum(v**2, axis=0))
            for group, v in zip(groups, columns)
        )
        return params.with_variance(max(total_q / total_n, SCORE_VARIANCE_FLOOR))

    subsets = [sites.subset(group.index) for group in groups]
    structures = [
        vecchia_structure(
            subset,
            params,
            config.solver.vecchia_m,
            config.solver.ordering,
            np.random.default_rng(len(group.index)),
        )
        for subset, group in zip(subsets, groups)
    ]
    space = KernelSearchSpace(
        params, config, domain_diameter(sites), float(np.ptp(sites.times))
    )

    def profiled(x):
        unit = space.decode(x)
        total_q, total_logdet = 0.0, 0.0
        for group, v, subset, structure in zip(groups, columns, subsets, structures):
            factor = vecchia_factor_from_structure(subset, unit, structure)
            white = factor.whiten(v)
            total_q += float(group.weights @ np.sum(white**2, axis=0))
            total_logdet -= float(group.weights.sum()) * factor.logdet_prec
        variance = max(total_q / total_n, SCORE_VARIANCE_FLOOR)
        objective = 0.5 * (total_n * np.log(variance) + total_logdet + total_n)
        return objective, variance

    def objective(x):
        try:
            value = profiled(x)[0]
        except (CokrigingError, ValueError, linalg.LinAlgError):
            return FAILED_OBJECTIVE
        return value if np.isfinite(value) else FAILED_OBJECTIVE

    x0 = space.encode(params)
    f0, variance = profiled(x0)
    best = x0
    result = minimize(
        objective,
        x0,
        method="Nelder-Mead",
        bounds=space.bounds,
        options={"maxfev": config.kernel.max_evals, "xatol": 1e-4, "fatol": 1e-8},
    )
    if result.fun < f0:
        best = result.x
        variance = profiled(best)[1]
    updated = space.decode(best).with_variance(variance)
    logger.debug(f"Kernel update {params} -> {updated}")
    return updated


def _rotate_kernels(
    kernels: list[KernelParams], rotation: np.ndarray
) -> list[KernelParams]:
    """Kernels of rotated score components: dominant source ranges, rotated variances."""
    # approximation: a mix of fields with different ranges is not itself a
    # single-range field; the next kernel update re-estimates the ranges
    if not kernels:
        return []
    variances = np.array([k.variance for k in kernels])
    rotated = []
    for row in rotation:
        source = int(np.argmax(np.abs(row)))
        variance = max(float(np.sum(row**2 * variances)), SCORE_VARIANCE_FLOOR)
        rotated.append(kernels[source].with_variance(variance))
    return rotated


def orthonormalize_cluster(
    cluster: ClusterParams, mom: ClusterMoments, basis: BasisSystem
) -> ClusterParams:
    """Rotate the loadings of one cluster to the orthonormal, variance-ordered form."""
    if mom.total <= 0:
        return cluster
    cov = mom.second.sum(axis=0) / mom.total
    q1 = mom.Q1
    theta_x, theta_e, lam, rotations = orthonormalize_blocks(
        cluster.theta_x, cluster.theta_e, cluster.lam,
        cov[:q1, :q1], cov[q1:, q1:], basis.gram,
    )
    cluster = cluster.copy()
    cluster.theta_x, cluster.theta_e, cluster.lam = theta_x, theta_e, lam
    if q1 and cluster.theta_x.size:
        cluster.alpha_kernels = _rotate_kernels(cluster.alpha_kernels, rotations["alpha"])
    cluster.eta_kernels = _rotate_kernels(cluster.eta_kernels, rotations["eta"])
    return cluster


def penalty_value(omega: ModelParams, basis: BasisSystem) -> float:
    """Roughness penalty 0.5 * sum lambda * theta' Omega theta over all blocks."""
    pen = basis.penalty
    lam = omega.penalties

    def quad(coef):
        return float(np.trace(coef.T @ pen @ coef)) if coef.size else 0.0

    total = 0.0
    for cluster in omega.clusters:
        total += lam.mean_y * quad(cluster.upsilon_y)
        total += lam.lam * quad(cluster.lam) + lam.theta_e * quad(cluster.theta_e)
        for k in range(omega.K):
            block = slice(k * basis.P, (k + 1) * basis.P)
            total += lam.mean_x * quad(cluster.upsilon_x[block])
            total += lam.theta_x * quad(cluster.theta_x[block])
    return 0.5 * total


def _field_density(
    values: np.ndarray,
    params: KernelParams,
    index: np.ndarray,
    sites: SpaceTimeSites,
    options: SolverOptions,
    independent: bool,
    cache: dict,
    key,
    reference: Optional[KernelParams],
) -> float:
    if independent:
        return float(
            -0.5 * (len(values) * (LOG_2PI + np.log(params.variance))
                    + values @ values / params.variance)
        )
    factor = cache.get((key, params))
    if factor is None:
        subset = sites.subset(index)
        structure = cache.get(key)
        if structure is None:
            structure = vecchia_structure(
                subset,
                reference or params,
                options.vecchia_m,
                options.ordering,
                np.random.default_rng(len(index)),
            )
            cache[key] = structure
        factor = vecchia_factor_from_structure(subset, params, structure)
        cache[(key, params)] = factor
    return float(factor.loglik(values))


def complete_data_terms(
    prepared: list[PreparedProfile],
    sites: SpaceTimeSites,
    samples: list[LatentSample],
    omega: ModelParams,
    basis: BasisSystem,
    options: SolverOptions = SolverOptions(),
    independent: bool = False,
    reference: Optional[ModelParams] = None,
) -> np.ndarray:
    """
    Complete-data log-likelihood of every sample, without the label prior.

    Sums the measurement densities given scores and the densities of the score
    fields: Vecchia densities, or independent normals when `independent`. The
    conditioning sets come from the kernels of `reference` when given, so two
    parameter sets can be compared on the same approximation.
    """
    cache: dict = {}
    n_basis = basis.P
    values = np.zeros(len(samples))
    for t, sample in enumerate(samples):
        z = np.asarray(sample.z, dtype=int)
        value = 0.0
        for i, prep in enumerate(prepared):
            cluster = omega.clusters[z[i]]
            alpha, eta = sample.alpha[i], sample.eta[i]
            if prep.has_response:
                fit = prep.B_y @ (
                    cluster.upsilon_y @ prep.delta + cluster.lam @ alpha
                    + cluster.theta_e @ eta
                )
                resid = prep.y - fit
                value -= 0.5 * (
                    len(resid) * (LOG_2PI + np.log(omega.sigma2_y))
                    + resid @ resid / omega.sigma2_y
                )
            for k in range(omega.K):
                if len(prep.x[k]) == 0:
                    continue
                block = slice(k * n_basis, (k + 1) * n_basis)
                fit = prep.B_x[k] @ (
                    cluster.upsilon_x[block] @ prep.delta
                    + cluster.theta_x[block] @ alpha
                )
                resid = prep.x[k] - fit
                value -= 0.5 * (
                    len(resid) * (LOG_2PI + np.log(omega.sigma2_x[k]))
                    + resid @ resid / omega.sigma2_x[k]
                )
        scores = np.hstack([sample.alpha, sample.eta])
        for g, cluster in enumerate(omega.clusters):
            index = np.flatnonzero(z == g)
            if len(index) == 0:
                continue
            for j, params in enumerate(cluster.kernels):
                ref = reference.clusters[g].kernels[j] if reference is not None else None
                value += _field_density(
                    scores[index, j], params, index, sites, options, independent,
                    cache, (g, j, index.tobytes()), ref,
                )
        values[t] = value
    return values


def complete_data_loglik(
    prepared: list[PreparedProfile],
    sites: SpaceTimeSites,
    samples: list[LatentSample],
    omega: ModelParams,
    basis: BasisSystem,
    options: SolverOptions = SolverOptions(),
    independent: bool = False,
) -> float:
    """Weighted penalized complete-data log-likelihood of sampled labels and scores."""
    weights = np.array([s.norm_weight for s in samples])
    terms = complete_data_terms(prepared, sites, samples, omega, basis, options, independent)
    return float(weights @ terms) - penalty_value(omega, basis)


def objective_change(
    prepared: list[PreparedProfile],
    sites: SpaceTimeSites,
    samples: list[LatentSample],
    before: ModelParams,
    after: ModelParams,
    basis: BasisSystem,
    options: SolverOptions = SolverOptions(),
    independent: bool = False,
) -> tuple[float, float]:
    """
    Change of the penalized complete-data log-likelihood and its MC standard error.

    Both parameter sets are evaluated on the same samples and on the
    conditioning sets of `before`.

    Returns:
        (gain, se) with se = sqrt(sum w^2 (d - dbar)^2) over per-sample differences d
    """
    weights = np.array([s.norm_weight for s in samples])
    old = complete_data_terms(
        prepared, sites, samples, before, basis, options, independent, before
    )
    new = complete_data_terms(
        prepared, sites, samples, after, basis, options, independent, before
    )
    diff = new - old
    mean = float(weights @ diff)
    se = float(np.sqrt(np.sum(weights**2 * (diff - mean) ** 2)))
    gain = mean - penalty_value(after, basis) + penalty_value(before, basis)
    return gain, se


def m_step(
    prepared: list[PreparedProfile],
    sites: SpaceTimeSites,
    samples: list[LatentSample],
    omega: ModelParams,
    basis: BasisSystem,
    graph: Optional[NeighborGraph],
    config: FitConfig,
    independent: bool = False,
    orthonormalize: bool = True,
    update_xi: bool = True,
) -> MStepResult:
    """
    One maximization step.

    Args:
        prepared: Prepared profiles
        sites: Sites of the profiles
        samples: Weighted Monte Carlo samples of labels and scores
        omega: Current parameters
        basis: Spline basis
        graph: Neighbor graph (needed for the coupling update)
        config: Fit settings
        independent: Treat scores as spatially independent (variance-only kernels,
            coupling kept fixed)
        orthonormalize: Rotate loadings to orthonormal form afterwards
        update_xi: Re-estimate the Potts coupling

    Returns:
        MStepResult with the new parameters and the recorded normal equations

    Raises:
        CokrigingError: If a normal-equation system stays singular after ridging
    """
    moments = cluster_moments(samples, omega.G, omega.Q1, omega.Q2)
    records: list[NormalEquation] = []
    new = omega.copy()

    for g, (cluster, mom) in enumerate(zip(omega.clusters, moments)):
        if mom.total <= 1e-12:
            logger.warning(f"Cluster {g + 1} received no samples; keeping its splines")
            continue
        new.clusters[g] = _update_cluster_splines(
            g, cluster, mom, prepared, new, basis, records
        )

    new.sigma2_y, new.sigma2_x = update_noise(prepared, new, moments, basis)

    jobs = [
        (g, j, params, field_groups(samples, g))
        for g, cluster in enumerate(new.clusters)
        for j, params in enumerate(cluster.kernels)
    ]

    def run(job):
        g, j, params, groups = job
        return update_kernel(params, groups, j, sites, config, independent)

    with ThreadPoolExecutor(max_workers=config.n_threads) as pool:
        kernels = list(pool.map(run, jobs))
    for (g, j, _, _), params in zip(jobs, kernels):
        cluster = new.clusters[g]
        if j < omega.Q1:
            cluster.alpha_kernels[j] = params
        else:
            cluster.eta_kernels[j - omega.Q1] = params

    if update_xi and not independent and graph is not None and omega.G > 1:
        new.xi = xi_update(
            [s.z for s in samples],
            np.array([s.norm_weight for s in samples]),
            graph,
            omega.G,
            xi_init=omega.xi,
            xi_max=config.xi_max,
        )

    # the label prior is left out, so the coupling update does not enter the gain
    gain, se = objective_change(
        prepared, sites, samples, omega, new, basis,
        config.solver.to_options(), independent,
    )
    n_obs = sum(len(p.y) + sum(len(x) for x in p.x) for p in prepared)
    if gain < -(OBJECTIVE_SLACK * se + OBJECTIVE_ROUNDING * (1 + n_obs)):
        logger.warning(
            f"M-step decreased the penalized complete-data log-likelihood by "
            f"{-gain:.4g} (MC SE {se:.3g})"
        )
    else:
        logger.debug(f"M-step objective gain {gain:.4g} (MC SE {se:.3g})")

    if orthonormalize:
        try:
            new.clusters = [
                orthonormalize_cluster(c, mom, basis)
                for c, mom in zip(new.clusters, moments)
            ]
        except (ValueError, linalg.LinAlgError) as e:
            raise CokrigingError.numeric_failure("orthonormalization", str(e)) from e

    logger.info(
        f"M-step: sigma2_y={new.sigma2_y:.4g}, "
        f"sigma2_x={np.array2string(new.sigma2_x, precision=4)}, xi={new.xi:.4f}"
    )
    return MStepResult(new, records, gain, se)
