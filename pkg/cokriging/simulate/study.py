"""
Clustering-accuracy study on replicated synthetic datasets.

Two fitting methods are compared on each dataset:

    importance  the Monte Carlo EM of cokriging.em.engine
    gibbs       the same initialization and M-step with an E-step that
                alternates draws of every cluster's score fields over all
                sites with single-site label updates given those fields

Accuracy is recorded after initialization (iteration 0) and after every
iteration, independent-model iterations included.
"""

import csv
import itertools
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from cokriging.config import FitConfig, StudyConfig
from cokriging.em.engine import FitState, fit, prepare_training
from cokriging.em.mstep import m_step
from cokriging.errors import CokrigingError
from cokriging.model.likelihood import (
    LOG_2PI,
    FactorCache,
    assemble_scores,
    cluster_terms,
    conditional_scores,
)
from cokriging.model.types import LatentSample, ModelParams, PreparedProfile, Profile
from cokriging.mrf.potts import NeighborGraph, gibbs_sweep
from cokriging.simulate.generator import generate
from cokriging.spatial.covariance import SpaceTimeSites

logger = logging.getLogger(__name__)

STUDY_COLUMNS = ["method", "n_i", "dataset", "iteration", "accuracy"]


@dataclass(frozen=True)
class StudyRow:
    method: str
    n_obs: int
    dataset: int
    iteration: int
    accuracy: float


def clustering_accuracy(predicted, truth, n_clusters: int) -> float:
    """
    Fraction of correctly labelled sites, maximized over label permutations.

    Raises:
        ValueError: If the label vectors differ in length
    """
    predicted = np.asarray(predicted, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if predicted.shape != truth.shape:
        raise ValueError(
            f"Label vectors differ in shape: {predicted.shape} vs {truth.shape}"
        )
    if len(truth) == 0:
        return 1.0
    return max(
        float(np.mean(np.asarray(perm)[predicted] == truth))
        for perm in itertools.permutations(range(n_clusters))
    )


def _gaussian_loglik(resid: np.ndarray, variance: float) -> float:
    return -0.5 * (
        len(resid) * (LOG_2PI + np.log(variance)) + float(resid @ resid) / variance
    )


def score_loglik_table(
    prepared: list[PreparedProfile], omega: ModelParams, fields: list[np.ndarray]
) -> np.ndarray:
    """
    (n, G) log-likelihood of each profile given the scores of each cluster's field.

    Args:
        prepared: Prepared profiles
        omega: Model parameters
        fields: Per cluster, (n, Q1 + Q2) scores at every site
    """
    table = np.zeros((len(prepared), omega.G))
    for g, cluster in enumerate(omega.clusters):
        P = cluster.upsilon_y.shape[0]
        for i, prep in enumerate(prepared):
            alpha, eta = fields[g][i, : omega.Q1], fields[g][i, omega.Q1 :]
            value = 0.0
            if prep.has_response:
                coef = (
                    cluster.upsilon_y @ prep.delta
                    + cluster.lam @ alpha
                    + cluster.theta_e @ eta
                )
                value += _gaussian_loglik(prep.y - prep.B_y @ coef, omega.sigma2_y)
            for k, (x, B) in enumerate(zip(prep.x, prep.B_x)):
                if len(x) == 0:
                    continue
                rows = slice(k * P, (k + 1) * P)
                coef = cluster.upsilon_x[rows] @ prep.delta + cluster.theta_x[rows] @ alpha
                value += _gaussian_loglik(x - B @ coef, omega.sigma2_x[k])
            table[i, g] = value
    return table


def gibbs_e_step(
    prepared: list[PreparedProfile],
    sites: SpaceTimeSites,
    omega: ModelParams,
    graph: NeighborGraph,
    config: FitConfig,
    rng: np.random.Generator,
    z0: np.ndarray,
) -> tuple[list[LatentSample], np.ndarray]:
    """
    Equally weighted samples of a Gibbs chain over labels and score fields.

    Each step draws all score fields over every site given the labels, then
    sweeps the labels given the fields. The chain continues from z0.

    Returns:
        (samples, last labels)
    """
    options = config.solver.to_options()
    terms = cluster_terms(prepared, omega)
    cache = FactorCache(sites, options)
    z = np.asarray(z0, dtype=int)
    n_samples = config.mc_samples
    samples = []
    for _ in range(n_samples):
        posteriors = conditional_scores(
            prepared, sites, z, omega, options, terms, cache,
            include_all=True, compute_loglik=False, rng=rng,
        )
        draws = [post.sample(rng) for post in posteriors]
        fields = [np.hstack(post.split(d)) for post, d in zip(posteriors, draws)]
        table = score_loglik_table(prepared, omega, fields)
        z = gibbs_sweep(z, omega.xi, graph, omega.G, rng, table)
        alpha, eta = assemble_scores(posteriors, draws, z)
        samples.append(
            LatentSample(z=z, alpha=alpha, eta=eta, norm_weight=1.0 / n_samples)
        )
    return samples, z


def gibbs_fit(
    profiles: list[Profile],
    config: FitConfig,
    callback: Optional[Callable[[FitState], None]] = None,
) -> FitState:
    """
    Fit with the Gibbs-proposal E-step after the usual initialization.

    Returns:
        FitState after config.max_iters Gibbs-proposal iterations
    """
    state = fit(profiles, config.model_copy(update={"max_iters": 0}), callback)
    _, prepared, sites = prepare_training(profiles, config)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(3)[2])
    for iteration in range(1, config.max_iters + 1):
        samples, state.labels = gibbs_e_step(
            prepared, sites, state.omega, state.graph, config, rng, state.labels
        )
        mstep = m_step(
            prepared, sites, samples, state.omega, state.basis, state.graph, config
        )
        state.omega = mstep.omega
        state.normal_equations = mstep.normal_equations
        state.samples = samples
        state.iteration = iteration
        state.xi_trace.append(state.omega.xi)
        logger.info(f"Gibbs-proposal iteration {iteration}: xi={state.omega.xi:.4f}")
        if callback is not None:
            callback(state)
    return state


FIT_METHODS = {"importance": fit, "gibbs": gibbs_fit}


def run_dataset(
    config: StudyConfig, n_obs: int, dataset: int, seed: np.random.SeedSequence
) -> list[StudyRow]:
    """Generate one dataset and record the accuracy trace of every method."""
    data_seed, fit_seed = seed.spawn(2)
    sim = config.sim.model_copy(update={"n_obs": n_obs})
    data = generate(sim, np.random.default_rng(data_seed))
    fit_config = config.fit.model_copy(
        update={"seed": int(fit_seed.generate_state(1)[0])}
    )
    G = fit_config.n_clusters

    rows = []
    for method in config.methods:
        trace: list[float] = []

        def record(state: FitState) -> None:
            if not trace:
                trace.append(clustering_accuracy(state.init_labels, data.labels, G))
            trace.append(clustering_accuracy(state.assignments(), data.labels, G))

        try:
            state = FIT_METHODS[method](data.profiles, fit_config, record)
        except CokrigingError as e:
            logger.warning(
                f"{method} failed on dataset {dataset} (n_i={n_obs}): {e}"
            )
            continue
        if not trace:
            trace.append(clustering_accuracy(state.init_labels, data.labels, G))
        rows.extend(
            StudyRow(method, n_obs, dataset, iteration, accuracy)
            for iteration, accuracy in enumerate(trace)
        )
        logger.info(
            f"Dataset {dataset} (n_i={n_obs}), {method}: "
            f"accuracy {trace[0]:.3f} -> {trace[-1]:.3f}"
        )
    return rows


def run_study(
    config: StudyConfig, rng: Optional[np.random.Generator] = None
) -> list[StudyRow]:
    """
    Run every method on config.n_datasets datasets per observation count.

    Datasets run in parallel with config.n_threads workers. Each gets its own
    seed, so the rows do not depend on the thread count.

    Args:
        config: Study settings
        rng: Optional generator overriding config.seed

    Returns:
        Rows ordered by observation count, dataset, method and iteration
    """
    entropy = config.seed if rng is None else int(rng.integers(2**63))
    tasks = [
        (n_obs, dataset)
        for n_obs in config.n_obs_settings
        for dataset in range(config.n_datasets)
    ]
    seeds = np.random.SeedSequence(entropy).spawn(len(tasks))
    logger.info(f"Study: {len(tasks)} datasets, methods {config.methods}")

    def run(args) -> list[StudyRow]:
        (n_obs, dataset), seed = args
        return run_dataset(config, n_obs, dataset, seed)

    with ThreadPoolExecutor(max_workers=config.n_threads) as pool:
        results = list(pool.map(run, zip(tasks, seeds)))
    rows = [row for result in results for row in result]
    for (method, n_obs, iteration), accuracy in summarize_study(rows).items():
        logger.debug(f"{method} n_i={n_obs} iteration {iteration}: {accuracy:.3f}")
    return rows


def summarize_study(rows: list[StudyRow]) -> dict[tuple[str, int, int], float]:
    """Mean accuracy per (method, n_i, iteration)."""
    groups: dict[tuple[str, int, int], list[float]] = defaultdict(list)
    for row in rows:
        groups[(row.method, row.n_obs, row.iteration)].append(row.accuracy)
    return {key: float(np.mean(values)) for key, values in sorted(groups.items())}


def write_study_csv(output_path: Path, rows: list[StudyRow]) -> Path:
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(STUDY_COLUMNS)
        for row in rows:
            writer.writerow(
                [row.method, row.n_obs, row.dataset, row.iteration, repr(row.accuracy)]
            )
    logger.info(f"Wrote {len(rows)} study rows to {output_path}")
    return output_path
