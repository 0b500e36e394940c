"""
Monte Carlo EM driver.

Each E-step draws label fields from the product-of-profiles proposal by Gibbs
sampling on the Potts prior tilted by the per-profile likelihood table, draws
the scores of every field from their Gaussian conditional, and weights each
draw by the ratio of the spatial to the per-profile likelihood.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from cokriging.config import FitConfig
from cokriging.em.initialize import independent_iteration, initialize
from cokriging.em.mstep import NormalEquation, m_step, penalty_value
from cokriging.errors import CokrigingError
from cokriging.model.likelihood import (
    FactorCache,
    assemble_scores,
    cluster_terms,
    conditional_scores,
    loglik_table,
    normalize_log_weights,
)
from cokriging.model.types import (
    LatentSample,
    ModelParams,
    PreparedProfile,
    Profile,
    prepare_profiles,
    profile_sites,
)
from cokriging.mrf.potts import NeighborGraph, build_graph, sample_fields
from cokriging.spatial.covariance import SpaceTimeSites
from cokriging.splines.basis import BasisSystem, build_basis

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class EStepResult:
    samples: list[LatentSample]
    ess: float
    loglik: float
    loglik_se: float
    last_field: np.ndarray


@dataclass(eq=False)
class FitState:
    """
    Fitted model and its history.

    Attributes:
        omega: Current parameters
        basis: Spline basis
        profiles: Training profiles
        sites: Their sites
        graph: Neighbor graph of the sites
        iteration: Completed EM iterations
        loglik_trace: Per iteration, sum_t w_t log f(X, Y | z_t) - penalty at the
            parameters entering the E-step; an importance-weighted proxy for the
            penalized observed-data log-likelihood, not that quantity itself
        loglik_se_trace: Its Monte Carlo standard error
        ess_trace: Effective sample size per E-step
        xi_trace: Coupling strength after each M-step
        samples: Weighted samples of the last E-step
        normal_equations: Normal equations of the last M-step
        labels: Label field the next Gibbs chain starts from
        init_labels: k-means labels
        phase: "independent" during the independent-model iterations, then "spatial"
        converged: Whether the relative-change criterion was met
    """

    omega: ModelParams
    basis: BasisSystem
    profiles: list[Profile]
    sites: SpaceTimeSites
    graph: NeighborGraph
    labels: np.ndarray
    init_labels: np.ndarray
    iteration: int = 0
    loglik_trace: list[float] = field(default_factory=list)
    loglik_se_trace: list[float] = field(default_factory=list)
    ess_trace: list[float] = field(default_factory=list)
    xi_trace: list[float] = field(default_factory=list)
    samples: list[LatentSample] = field(default_factory=list)
    normal_equations: list[NormalEquation] = field(default_factory=list)
    converged: bool = False
    phase: str = "independent"

    def cluster_probabilities(self) -> np.ndarray:
        """(n, G) weighted label frequencies of the last E-step."""
        probs = np.zeros((len(self.labels), self.omega.G))
        if not self.samples:
            probs[np.arange(len(self.labels)), self.labels] = 1.0
            return probs
        for sample in self.samples:
            probs[np.arange(len(sample.z)), sample.z] += sample.norm_weight
        return probs / probs.sum(axis=1, keepdims=True)

    def assignments(self) -> np.ndarray:
        return np.argmax(self.cluster_probabilities(), axis=1)


def e_step(
    prepared: list[PreparedProfile],
    sites: SpaceTimeSites,
    omega: ModelParams,
    graph: NeighborGraph,
    config: FitConfig,
    rng: np.random.Generator,
    z0: np.ndarray,
) -> EStepResult:
    """
    Draw weighted label and score samples.

    Args:
        prepared: Prepared profiles
        sites: Profile sites
        omega: Current parameters
        graph: Neighbor graph
        config: Fit settings
        rng: Random generator
        z0: Starting labels of the Gibbs chain

    Returns:
        EStepResult with normalized weights already stored on the samples
    """
    options = config.solver.to_options()
    terms = cluster_terms(prepared, omega)
    table = loglik_table(prepared, omega, terms)
    n_samples = config.mc_samples
    if omega.G == 1:
        fields = [np.zeros(len(prepared), dtype=int)] * n_samples
    else:
        fields = sample_fields(
            z0, omega.xi, graph, omega.G, n_samples,
            config.gibbs_burn_in, config.gibbs_thin, rng, table,
        )
    seeds = np.random.SeedSequence(int(rng.integers(2**63))).spawn(n_samples)
    cache = FactorCache(sites, options)
    rows = np.arange(len(prepared))

    def draw(args):
        z, seed = args
        local = np.random.default_rng(seed)
        posteriors = conditional_scores(
            prepared, sites, z, omega, options, terms, cache, rng=local
        )
        loglik = float(sum(p.loglik for p in posteriors))
        alpha, eta = assemble_scores(posteriors, [p.sample(local) for p in posteriors], z)
        return LatentSample(
            z=z,
            alpha=alpha,
            eta=eta,
            log_weight=loglik - float(table[rows, z].sum()),
            loglik=loglik,
        )

    with ThreadPoolExecutor(max_workers=config.n_threads) as pool:
        samples = list(pool.map(draw, zip(fields, seeds)))

    weights, ess = normalize_log_weights(np.array([s.log_weight for s in samples]))
    for sample, w in zip(samples, weights):
        sample.norm_weight = float(w)
    if ess < 2:
        logger.warning(f"Effective sample size {ess:.2f} below 2; continuing")

    logliks = np.array([s.loglik for s in samples])
    mean = float(weights @ logliks)
    se = float(np.sqrt(np.sum(weights**2 * (logliks - mean) ** 2)))
    return EStepResult(samples, ess, mean, se, np.asarray(fields[-1]))


def training_graph(sites: SpaceTimeSites, config: FitConfig) -> NeighborGraph:
    n = len(sites)
    k = config.graph.k
    if n > 1 and k >= n:
        logger.warning(f"graph.k={k} not below the {n} sites; using k={n - 1}")
        k = n - 1
    return build_graph(sites, k, config.graph.distance_weights, config.graph.weighting)


def prepare_training(
    profiles: list[Profile], config: FitConfig
) -> tuple[BasisSystem, list[PreparedProfile], SpaceTimeSites]:
    """
    Basis, prepared profiles and sites of a training set.

    Raises:
        CokrigingError: If a profile lies outside the basis domain or the
            coordinates do not fit the coordinate mode
    """
    if not profiles:
        raise CokrigingError.invalid_config("data", "no profiles to fit")
    basis_cfg = config.basis
    basis = build_basis(
        basis_cfg.domain_lo, basis_cfg.domain_hi, basis_cfg.n_interior_knots
    )
    try:
        prepared = prepare_profiles(profiles, basis, config.n_harmonics)
        sites = profile_sites(profiles, config.coordinate_mode)
    except ValueError as e:
        raise CokrigingError.out_of_domain("training profiles", str(e)) from e
    return basis, prepared, sites


def fit(
    profiles: list[Profile],
    config: FitConfig,
    callback: Optional[Callable[[FitState], None]] = None,
) -> FitState:
    """
    Fit the mixture model by Monte Carlo EM.

    Args:
        profiles: Training profiles
        config: Fit settings
        callback: Called with the state after every iteration

    Returns:
        FitState; with max_iters = 0 this is the initialization

    Raises:
        CokrigingError: On invalid data or numerical failure
    """
    init_seed, loop_seed = np.random.SeedSequence(config.seed).spawn(2)
    basis, prepared, sites = prepare_training(profiles, config)
    graph = training_graph(sites, config)
    logger.info(
        f"Fitting G={config.n_clusters}, Q1={config.n_predictor_pcs}, "
        f"Q2={config.n_residual_pcs} to {len(profiles)} profiles"
    )

    init = initialize(
        profiles, prepared, sites, basis, config, np.random.default_rng(init_seed)
    )
    state = FitState(
        omega=init.omega,
        basis=basis,
        profiles=profiles,
        sites=sites,
        graph=graph,
        labels=init.labels,
        init_labels=init.labels,
    )

    rng = np.random.default_rng(loop_seed)
    for iteration in range(1, config.init.independent_em_iters + 1):
        state.omega, state.samples = independent_iteration(
            prepared, sites, state.omega, basis, config, rng
        )
        logger.info(f"Independent-model iteration {iteration} done")
        if callback is not None:
            callback(state)
    if state.samples and config.n_clusters > 1:
        state.labels = state.assignments()
    state.samples = []
    state.phase = "spatial"

    stalled = 0
    for iteration in range(1, config.max_iters + 1):
        estep = e_step(prepared, sites, state.omega, graph, config, rng, state.labels)
        value = estep.loglik - penalty_value(state.omega, basis)
        mstep = m_step(
            prepared, sites, estep.samples, state.omega, basis, graph, config
        )

        previous = state.loglik_trace[-1] if state.loglik_trace else None
        state.omega = mstep.omega
        state.normal_equations = mstep.normal_equations
        state.samples = estep.samples
        state.labels = estep.last_field
        state.iteration = iteration
        state.loglik_trace.append(value)
        state.loglik_se_trace.append(estep.loglik_se)
        state.ess_trace.append(estep.ess)
        state.xi_trace.append(state.omega.xi)
        logger.info(
            f"Iteration {iteration}: loglik={value:.4f} (se {estep.loglik_se:.3g}), "
            f"ess={estep.ess:.1f}, xi={state.omega.xi:.4f}"
        )
        if callback is not None:
            callback(state)

        if previous is not None:
            change = abs(value - previous) / max(abs(previous), 1.0)
            stalled = stalled + 1 if change < config.tol else 0
            if stalled >= config.patience:
                state.converged = True
                logger.info(f"Converged after {iteration} iterations")
                break

    if not state.converged and config.max_iters:
        logger.info(f"Stopped after {state.iteration} iterations without converging")
    return state
