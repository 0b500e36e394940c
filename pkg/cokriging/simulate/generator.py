"""
Synthetic clustering data on the unit square.

Sites are drawn uniformly on [0, 1]^2 at time zero and labelled by a long Potts
Gibbs run on their nearest-neighbor graph. Each cluster has its own principal
component functions, columns of an L2-orthonormal cubic spline basis, and its
own exponential-covariance score fields. Every site observes only the response
on a uniform pressure grid.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from cokriging.config import SimConfig
from cokriging.model.types import Profile
from cokriging.mrf.potts import NeighborGraph, build_graph, sample_fields
from cokriging.spatial.covariance import KernelParams, SpaceTimeSites, cov_matrix
from cokriging.splines.basis import (
    BasisSystem,
    build_basis,
    evaluate,
    orthonormal_basis_coefficients,
)

logger = logging.getLogger(__name__)

# Cubic splines have n_interior_knots + 4 basis functions
SPLINE_ORDER = 4
JITTER = 1e-10


@dataclass(eq=False)
class SimulatedData:
    """
    One synthetic dataset.

    Attributes:
        profiles: Response-only profiles, ids "site_1" ... "site_n"
        labels: (n,) zero-based true cluster labels
        scores: (n, Q) true scores of each site in its own cluster
        sites: Euclidean sites
        graph: Neighbor graph the labels were drawn on
    """

    profiles: list[Profile]
    labels: np.ndarray
    scores: np.ndarray
    sites: SpaceTimeSites
    graph: NeighborGraph


def mean_curve(p) -> np.ndarray:
    """Common mean e^(2 - 2p) cos(5 (p - 0.1))."""
    p = np.asarray(p, dtype=float)
    return np.exp(2.0 - 2.0 * p) * np.cos(5.0 * (p - 0.1))


def simulation_basis(config: SimConfig) -> BasisSystem:
    return build_basis(0.0, 1.0, config.basis_dim - SPLINE_ORDER)


def component_coefficients(config: SimConfig) -> np.ndarray:
    """
    (G, P, Q) B-spline coefficients of the principal component functions.

    Component l of cluster g (both 1-based) is orthonormal function g + 2l.
    """
    ortho = orthonormal_basis_coefficients(simulation_basis(config))
    coefs = np.zeros((config.n_clusters, ortho.shape[0], config.n_pcs))
    for g in range(config.n_clusters):
        for l in range(config.n_pcs):
            coefs[g, :, l] = ortho[:, (g + 1) + 2 * (l + 1) - 1]
    return coefs


def sample_labels(
    graph: NeighborGraph, config: SimConfig, rng: np.random.Generator
) -> np.ndarray:
    """Potts field after burn_in_sweeps Gibbs sweeps from uniform labels."""
    z0 = rng.integers(config.n_clusters, size=graph.n)
    if config.n_clusters == 1 or config.burn_in_sweeps == 0:
        return z0
    return sample_fields(
        z0, config.xi, graph, config.n_clusters, 1, config.burn_in_sweeps - 1, 1, rng
    )[0]


def sample_scores(
    sites: SpaceTimeSites,
    labels: np.ndarray,
    config: SimConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Exact Gaussian draws of every cluster's score fields over all sites.

    Returns:
        (n, Q) scores taken from the fields of each site's own cluster
    """
    n = len(sites)
    scores = np.zeros((n, config.n_pcs))
    for g in range(config.n_clusters):
        own = labels == g
        for l in range(config.n_pcs):
            params = KernelParams(
                variance=config.score_variances[l],
                range_x=config.ranges[g][l],
                kind="exponential",
            )
            cov = cov_matrix(sites, params, nugget=JITTER)
            chol = linalg.cholesky(cov, lower=True)
            field = chol @ rng.standard_normal(n)
            scores[own, l] = field[own]
    return scores


def generate(config: SimConfig, rng: np.random.Generator) -> SimulatedData:
    """
    Draw one synthetic dataset.

    Args:
        config: Simulation settings
        rng: Random generator

    Returns:
        SimulatedData with profiles, true labels and true scores
    """
    n = config.n_sites
    sites = SpaceTimeSites(rng.random((n, 2)), np.zeros(n), "euclidean")
    graph = build_graph(sites, config.n_neighbors, weighting=config.weighting)
    labels = sample_labels(graph, config, rng)
    scores = sample_scores(sites, labels, config, rng)

    pressures = np.linspace(0.0, 1.0, config.n_obs)
    design = evaluate(simulation_basis(config), pressures)
    curves = design @ component_coefficients(config)
    mu = mean_curve(pressures)
    noise_sd = np.sqrt(config.noise_var)

    profiles = []
    for i in range(n):
        values = mu + curves[labels[i]] @ scores[i]
        values = values + noise_sd * rng.standard_normal(config.n_obs)
        profiles.append(
            Profile(
                profile_id=f"site_{i + 1}",
                coords=tuple(sites.coords[i]),
                time=0.0,
                y_pressures=pressures,
                y_values=values,
            )
        )
    counts = np.bincount(labels, minlength=config.n_clusters)
    logger.info(
        f"Simulated {n} profiles with {config.n_obs} observations; "
        f"cluster sizes {counts.tolist()}"
    )
    return SimulatedData(profiles, labels, scores, sites, graph)
