"""
AIC model selection.

The observed-data likelihood f(X, Y) is estimated by importance sampling with
labels drawn independently per profile from the spatially independent mixture
posterior. The unnormalized Potts prior enters without its normalizing
constant, which depends only on the coupling strength and the graph and
cancels between models sharing them.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import log_softmax, logsumexp

from cokriging.config import FitConfig, PenaltyConfig, SelectConfig
from cokriging.em.engine import FitState, fit, prepare_training
from cokriging.em.mstep import NormalEquation
from cokriging.errors import CokrigingError
from cokriging.model.likelihood import (
    FactorCache,
    SolverOptions,
    cluster_terms,
    loglik_table,
    marginal_loglik,
)
from cokriging.model.types import ModelParams, PreparedProfile, Profile
from cokriging.mrf.potts import NeighborGraph, log_prior_unnormalized
from cokriging.spatial.covariance import SpaceTimeSites

logger = logging.getLogger(__name__)

SELECTION_COLUMNS = [
    "n_predictor_pcs",
    "n_residual_pcs",
    "penalty_scale",
    "loglik",
    "loglik_se",
    "dof",
    "aic",
    "aic_se",
    "selected",
]


@dataclass(frozen=True)
class AicResult:
    loglik: float
    loglik_se: float
    dof: float

    @property
    def aic(self) -> float:
        return -2.0 * self.loglik + 2.0 * self.dof

    @property
    def aic_se(self) -> float:
        return 2.0 * self.loglik_se


def log_marginal_estimate(
    prepared: list[PreparedProfile],
    sites: SpaceTimeSites,
    omega: ModelParams,
    graph: NeighborGraph,
    n_samples: int,
    rng: np.random.Generator,
    options: SolverOptions = SolverOptions(),
) -> tuple[float, float]:
    """
    Importance-sampling estimate of log f(X, Y) up to the Potts constant.

    Returns:
        (estimate, Monte Carlo standard error by the delta method)
    """
    terms = cluster_terms(prepared, omega)
    table = loglik_table(prepared, omega, terms)
    cache = FactorCache(sites, options)
    rows = np.arange(len(prepared))
    if omega.G == 1:
        z = np.zeros(len(prepared), dtype=int)
        return marginal_loglik(prepared, sites, z, omega, options, terms, cache, rng), 0.0

    log_probs = log_softmax(table, axis=1)
    cumulative = np.cumsum(np.exp(log_probs), axis=1)
    values = np.empty(n_samples)
    for t in range(n_samples):
        u = rng.random(len(prepared))
        z = np.minimum((u[:, None] > cumulative).sum(axis=1), omega.G - 1)
        values[t] = (
            marginal_loglik(prepared, sites, z, omega, options, terms, cache, rng)
            + log_prior_unnormalized(z, omega.xi, graph)
            - float(log_probs[rows, z].sum())
        )
    estimate = float(logsumexp(values) - np.log(n_samples))
    if n_samples < 2:
        return estimate, 0.0
    ratios = np.exp(values - values.max())
    se = float(np.std(ratios, ddof=1) / (np.sqrt(n_samples) * ratios.mean()))
    return estimate, se


def unpenalized_parameter_count(
    omega: ModelParams, config: FitConfig, time_varies: bool
) -> int:
    """Noise variances, coupling strength and score-field kernel parameters."""
    per_kernel = 2 + int(time_varies)
    if config.kernel.estimate_smoothness and config.kernel.kind == "matern":
        per_kernel += 1
    if config.kernel.estimate_deformation and config.coordinate_mode == "sphere":
        per_kernel += 5
    count = 1 + omega.K + omega.G * omega.n_scores * per_kernel
    return count + (1 if omega.G > 1 else 0)


def nominal_spline_count(omega: ModelParams, n_basis: int) -> int:
    """Spline coefficients of all blocks, used when no normal equations are recorded."""
    n_seasonal = 2 * omega.R + 1
    per_cluster = n_basis * (
        n_seasonal * (1 + omega.K) + omega.K * omega.Q1 + omega.Q1 + omega.Q2
    )
    return omega.G * per_cluster


def effective_dof(
    omega: ModelParams,
    normal_equations: list[NormalEquation],
    config: FitConfig,
    time_varies: bool,
    n_basis: int,
) -> float:
    """
    Effective number of parameters.

    Penalized blocks contribute trace((M + lambda Omega)^-1 M) from the final
    normal equations; every other parameter counts one.
    """
    if normal_equations:
        spline = sum(eq.effective_dof() for eq in normal_equations)
    else:
        logger.warning("No normal equations recorded; counting spline coefficients")
        spline = float(nominal_spline_count(omega, n_basis))
    return spline + unpenalized_parameter_count(omega, config, time_varies)


def aic(
    state: FitState,
    config: FitConfig,
    n_samples: int,
    rng: np.random.Generator,
) -> AicResult:
    """
    AIC of a fitted model, -2 log f(X, Y) + 2 dof.

    Args:
        state: Fitted model
        config: Settings it was fitted with
        n_samples: Importance samples for the likelihood estimate
        rng: Random generator

    Returns:
        AicResult with the likelihood estimate, its standard error and the dof
    """
    _, prepared, _ = prepare_training(state.profiles, config)
    loglik, se = log_marginal_estimate(
        prepared,
        state.sites,
        state.omega,
        state.graph,
        n_samples,
        rng,
        config.solver.to_options(),
    )
    time_varies = bool(np.ptp(state.sites.times) > 0)
    dof = effective_dof(
        state.omega, state.normal_equations, config, time_varies, state.basis.P
    )
    logger.info(f"AIC: loglik={loglik:.3f} (se {se:.3g}), dof={dof:.2f}")
    return AicResult(loglik=loglik, loglik_se=se, dof=dof)


@dataclass(frozen=True)
class Candidate:
    n_predictor_pcs: int
    n_residual_pcs: int
    penalty_scale: float

    def apply(self, base: FitConfig) -> FitConfig:
        penalties = PenaltyConfig(
            **{
                name: value * self.penalty_scale
                for name, value in base.penalties.model_dump().items()
            }
        )
        return base.model_copy(
            update={
                "n_predictor_pcs": self.n_predictor_pcs,
                "n_residual_pcs": self.n_residual_pcs,
                "penalties": penalties,
            }
        )


@dataclass(frozen=True)
class SelectionRow:
    candidate: Candidate
    result: Optional[AicResult]
    selected: bool = False

    @property
    def aic(self) -> float:
        return self.result.aic if self.result is not None else np.inf


def candidates(config: SelectConfig) -> list[Candidate]:
    predictor = config.predictor_pcs or [config.fit.n_predictor_pcs]
    return [
        Candidate(q1, q2, scale)
        for q1 in predictor
        for q2 in config.residual_pcs
        for scale in config.penalty_scales
    ]


def choose(rows: list[SelectionRow]) -> int:
    """
    Index of the smallest model within one standard error of the minimum AIC.

    Smaller means fewer principal components, then fewer effective parameters.
    """
    finite = [i for i, row in enumerate(rows) if np.isfinite(row.aic)]
    if not finite:
        raise CokrigingError.numeric_failure("model selection", "every candidate failed")
    best = min(finite, key=lambda i: rows[i].aic)
    limit = rows[best].aic + rows[best].result.aic_se
    eligible = [i for i in finite if rows[i].aic <= limit]
    return min(
        eligible,
        key=lambda i: (
            rows[i].candidate.n_predictor_pcs + rows[i].candidate.n_residual_pcs,
            rows[i].result.dof,
        ),
    )


def select(profiles: list[Profile], config: SelectConfig) -> list[SelectionRow]:
    """
    Fit every candidate and mark the selected one.

    Candidates are fitted in parallel with config.n_threads workers; each gets
    its own random stream so results do not depend on the thread count.
    """
    grid = candidates(config)
    seeds = np.random.SeedSequence(config.seed).spawn(len(grid))
    logger.info(f"Model selection over {len(grid)} candidates")

    def evaluate(args) -> SelectionRow:
        candidate, seed = args
        fit_config = candidate.apply(config.fit)
        try:
            state = fit(profiles, fit_config)
            result = aic(
                state, fit_config, config.aic_samples, np.random.default_rng(seed)
            )
        except CokrigingError as e:
            logger.warning(f"Candidate {candidate} failed: {e}")
            return SelectionRow(candidate, None)
        return SelectionRow(candidate, result)

    with ThreadPoolExecutor(max_workers=config.n_threads) as pool:
        rows = list(pool.map(evaluate, zip(grid, seeds)))
    chosen = choose(rows)
    rows[chosen] = SelectionRow(rows[chosen].candidate, rows[chosen].result, True)
    logger.info(f"Selected {rows[chosen].candidate}")
    return rows


def write_selection_csv(output_path: Path, rows: list[SelectionRow]) -> Path:
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SELECTION_COLUMNS)
        for row in rows:
            res = row.result
            values = (
                [res.loglik, res.loglik_se, res.dof, res.aic, res.aic_se]
                if res is not None
                else [np.nan] * 5
            )
            writer.writerow(
                [
                    row.candidate.n_predictor_pcs,
                    row.candidate.n_residual_pcs,
                    repr(float(row.candidate.penalty_scale)),
                ]
                + [repr(float(v)) for v in values]
                + [int(row.selected)]
            )
    logger.info(f"Wrote selection table to {output_path}")
    return output_path
