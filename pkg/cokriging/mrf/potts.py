"""
Distance-weighted Potts model over profile sites.

Labels are stored zero-based (0..G-1) internally; files and reports use 1..G.
"""

import logging
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import brentq
from scipy.spatial.distance import cdist
from scipy.special import softmax

from cokriging.spatial.covariance import SpaceTimeSites

logger = logging.getLogger(__name__)

DAYS_PER_YEAR = 365.25
MIN_DISTANCE = 1e-6
XI_MAX = 20.0

Weighting = Literal["inverse_distance", "unit"]


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    """
    Symmetrized k-nearest-neighbor graph with positive edge weights.

    Attributes:
        n: Number of sites
        k: Neighbors per site before symmetrization
        weights: Symmetric sparse (n, n) matrix of edge weights
    """

    n: int
    k: int
    weights: sparse.csr_matrix

    def neighbors(self, i: int) -> np.ndarray:
        start, stop = self.weights.indptr[i], self.weights.indptr[i + 1]
        return self.weights.indices[start:stop]

    def edge_weights(self, i: int) -> np.ndarray:
        start, stop = self.weights.indptr[i], self.weights.indptr[i + 1]
        return self.weights.data[start:stop]

    def edges(self, i: int) -> list[tuple[int, float]]:
        return list(zip(self.neighbors(i).tolist(), self.edge_weights(i).tolist()))


def site_distances(
    sites: SpaceTimeSites, weights: Sequence[float] = (1.0, 3.0, 12.0)
) -> np.ndarray:
    """
    Pairwise distances used for the neighbor graph.

    Sphere mode combines circular longitude difference, latitude difference (both
    in degrees) and circular day-of-year difference in fractions of a year,
    weighted by (w_lon, w_lat, w_day). Euclidean mode uses plain Euclidean distance.
    """
    if sites.mode == "euclidean":
        return cdist(sites.coords, sites.coords)
    w_lon, w_lat, w_day = weights
    lon, lat = sites.coords[:, 0], sites.coords[:, 1]
    d_lon = np.abs(lon[:, None] - lon[None, :]) % 360.0
    d_lon = np.minimum(d_lon, 360.0 - d_lon)
    d_lat = np.abs(lat[:, None] - lat[None, :])
    day = np.mod(sites.times, DAYS_PER_YEAR)
    d_day = np.abs(day[:, None] - day[None, :])
    d_day = np.minimum(d_day, DAYS_PER_YEAR - d_day) / DAYS_PER_YEAR
    return w_lon * d_lon + w_lat * d_lat + w_day * d_day


def build_graph(
    sites: SpaceTimeSites,
    k: int,
    weights: Sequence[float] = (1.0, 3.0, 12.0),
    weighting: Weighting = "inverse_distance",
) -> NeighborGraph:
    """
    Build the symmetrized kNN graph of the sites.

    Args:
        sites: Profile sites (lon/lat/day-of-year or Euclidean)
        k: Neighbors per site, must be smaller than the number of sites
        weights: Distance weights (lon, lat, day-of-year) in sphere mode
        weighting: Edge weights 1/dist or all ones

    Returns:
        NeighborGraph whose adjacency is the union of the kNN relations
    """
    n = len(sites)
    if n <= 1:
        return NeighborGraph(n, 0, sparse.csr_matrix((n, n)))
    if not 1 <= k < n:
        raise ValueError(f"Need 1 <= k < n, got k={k}, n={n}")

    dist = site_distances(sites, weights)
    np.fill_diagonal(dist, np.inf)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    cols = nearest.ravel()
    edge_dist = dist[rows, cols]
    if weighting == "unit":
        values = np.ones_like(edge_dist)
    else:
        values = 1.0 / np.maximum(edge_dist, MIN_DISTANCE)
    directed = sparse.csr_matrix((values, (rows, cols)), shape=(n, n))
    symmetric = directed.maximum(directed.T).tocsr()
    symmetric.sort_indices()
    logger.debug(
        f"Neighbor graph: {n} sites, k={k}, {symmetric.nnz // 2} undirected edges"
    )
    return NeighborGraph(n, k, symmetric)


def label_sums(z: np.ndarray, graph: NeighborGraph, G: int) -> np.ndarray:
    """(n, G) matrix of summed edge weights to neighbors carrying each label."""
    onehot = np.zeros((graph.n, G))
    onehot[np.arange(graph.n), z] = 1.0
    return np.asarray(graph.weights @ onehot)


def potts_conditional(
    z: np.ndarray,
    i: int,
    xi: float,
    graph: NeighborGraph,
    G: int,
    external_loglik: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Conditional label distribution of site i given all other labels.

    Args:
        z: Current labels (0-based)
        i: Site index
        xi: Coupling strength
        graph: Neighbor graph
        G: Number of labels
        external_loglik: Optional per-label log-likelihood added to the logits

    Returns:
        Length-G probability vector
    """
    counts = np.bincount(
        z[graph.neighbors(i)], weights=graph.edge_weights(i), minlength=G
    )
    logits = xi * counts
    if external_loglik is not None:
        logits = logits + external_loglik
    return softmax(logits)


def gibbs_sweep(
    z: np.ndarray,
    xi: float,
    graph: NeighborGraph,
    G: int,
    rng: np.random.Generator,
    external_loglik_table: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    One systematic-scan sweep of single-site Gibbs updates (site order 0..n-1).

    Returns:
        New label vector; the input is not modified
    """
    z = np.array(z, dtype=int, copy=True)
    uniforms = rng.random(graph.n)
    indptr, indices, data = (
        graph.weights.indptr,
        graph.weights.indices,
        graph.weights.data,
    )
    for i in range(graph.n):
        nbrs = indices[indptr[i] : indptr[i + 1]]
        logits = xi * np.bincount(
            z[nbrs], weights=data[indptr[i] : indptr[i + 1]], minlength=G
        )
        if external_loglik_table is not None:
            logits = logits + external_loglik_table[i]
        probs = np.exp(logits - logits.max())
        cumulative = np.cumsum(probs)
        label = int(np.searchsorted(cumulative, uniforms[i] * cumulative[-1], "right"))
        z[i] = min(label, G - 1)
    return z


def sample_fields(
    z0: np.ndarray,
    xi: float,
    graph: NeighborGraph,
    G: int,
    n_samples: int,
    burn_in: int,
    thin: int,
    rng: np.random.Generator,
    external_loglik_table: Optional[np.ndarray] = None,
) -> list[np.ndarray]:
    """
    Run a Gibbs chain and keep every thin-th field after burn-in.

    Runs burn_in + n_samples * thin sweeps in total.
    """
    if n_samples < 1 or thin < 1 or burn_in < 0:
        raise ValueError("Need n_samples >= 1, thin >= 1 and burn_in >= 0")
    z = np.asarray(z0, dtype=int)
    for _ in range(burn_in):
        z = gibbs_sweep(z, xi, graph, G, rng, external_loglik_table)
    fields = []
    for _ in range(n_samples):
        for _ in range(thin):
            z = gibbs_sweep(z, xi, graph, G, rng, external_loglik_table)
        fields.append(z)
    return fields


def agreement(z: np.ndarray, graph: NeighborGraph) -> float:
    """Sum of edge weights over undirected edges whose endpoints agree."""
    coo = graph.weights.tocoo()
    upper = coo.row < coo.col
    same = z[coo.row[upper]] == z[coo.col[upper]]
    return float(coo.data[upper][same].sum())


def log_prior_unnormalized(z: np.ndarray, xi: float, graph: NeighborGraph) -> float:
    """
    Unnormalized Potts log-probability, zero for the all-agree configuration.

    The omitted constant depends only on xi and the graph.
    """
    total = float(sparse.triu(graph.weights, k=1).sum())
    return xi * (agreement(z, graph) - total)


def pseudo_loglik_gradient(
    xi: float,
    fields: Sequence[np.ndarray],
    weights: np.ndarray,
    graph: NeighborGraph,
    G: int,
) -> float:
    """Weighted derivative of the Potts pseudo-log-likelihood in xi."""
    grad = 0.0
    for z, w in zip(fields, weights):
        sums = label_sums(z, graph, G)
        own = sums[np.arange(graph.n), z]
        expected = np.sum(sums * softmax(xi * sums, axis=1), axis=1)
        grad += w * float(np.sum(own - expected))
    return grad


def xi_update(
    fields: Sequence[np.ndarray],
    weights: np.ndarray,
    graph: NeighborGraph,
    G: int,
    xi_init: float = 0.5,
    xi_max: float = XI_MAX,
) -> float:
    """
    Maximize the weighted pseudo-likelihood of the coupling strength.

    Finds the root of the gradient on [0, xi_max] by bracketing; returns the
    boundary when the gradient keeps one sign.

    Args:
        fields: Sampled label fields
        weights: Self-normalized sample weights
        graph: Neighbor graph
        G: Number of labels
        xi_init: Current value, reported in the log
        xi_max: Upper end of the search interval

    Returns:
        Updated coupling strength
    """
    weights = np.asarray(weights, dtype=float)
    if G < 2 or graph.weights.nnz == 0:
        return float(xi_init)

    def gradient(x):
        return pseudo_loglik_gradient(x, fields, weights, graph, G)

    at_zero = gradient(0.0)
    if at_zero <= 0.0:
        logger.info("Pseudo-likelihood gradient non-positive at 0, setting xi = 0")
        return 0.0
    at_max = gradient(xi_max)
    if at_max >= 0.0:
        logger.warning(
            f"Pseudo-likelihood gradient positive up to xi_max={xi_max}; "
            f"returning the boundary"
        )
        return float(xi_max)
    xi = float(brentq(gradient, 0.0, xi_max, xtol=1e-8))
    logger.debug(f"xi updated {xi_init:.4f} -> {xi:.4f}")
    return xi
