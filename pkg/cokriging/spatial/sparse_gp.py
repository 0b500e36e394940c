"""
Sparse Gaussian-process numerics.

Vecchia approximation of score-field precision matrices, conjugate-gradient
solves and Lanczos quadrature for Gaussian draws, quadratic forms and
log-determinants. Operators are passed as callables acting on vectors so the
same routines serve sparse precision matrices and dense test matrices.
"""

import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable, Literal, Optional

import numpy as np
from scipy import sparse

from cokriging.errors import CokrigingError
from cokriging.spatial.covariance import (
    KernelParams,
    SpaceTimeSites,
    kernel,
    pairwise_distance,
)

logger = logging.getLogger(__name__)

Ordering = Literal["maxmin", "coordinate", "random"]
Operator = Callable[[np.ndarray], np.ndarray]

DUPLICATE_DISTANCE = 1e-9
JITTER = 1e-10
DENSE_FALLBACK_DIM = 500


@dataclass(frozen=True, eq=False)
class VecchiaStructure:
    """
    Ordering and conditioning sets of a Vecchia approximation.

    Attributes:
        ordering: ordering[k] is the original index of the k-th ordered site
        neighbors: (n, m) ordered positions of conditioning sites, -1 padded
    """

    ordering: np.ndarray
    neighbors: np.ndarray

    @property
    def n(self) -> int:
        return len(self.ordering)


@dataclass(frozen=True, eq=False)
class VecchiaFactor:
    """
    Sparse inverse-Cholesky factor with Sigma^-1 ~= U U^T in ordered space.

    Attributes:
        structure: Ordering and neighbor sets
        coefficients: (n, m) kriging weights on the conditioning sites
        cond_var: (n,) conditional variances
        U: Sparse upper-triangular factor (ordered space)
    """

    structure: VecchiaStructure
    coefficients: np.ndarray
    cond_var: np.ndarray
    U: sparse.csc_matrix

    @property
    def ordering(self) -> np.ndarray:
        return self.structure.ordering

    @property
    def neighbor_sets(self) -> list[np.ndarray]:
        """Conditioning sets in original site indices."""
        order = self.structure.ordering
        return [order[row[row >= 0]] for row in self.structure.neighbors]

    @property
    def logdet_prec(self) -> float:
        return float(-np.sum(np.log(self.cond_var)))

    def precision(self) -> sparse.csr_matrix:
        """Approximate precision matrix in the original site order."""
        order = self.structure.ordering
        coo = self.U.tocoo()
        u_orig = sparse.csr_matrix(
            (coo.data, (order[coo.row], order[coo.col])), shape=self.U.shape
        )
        return (u_orig @ u_orig.T).tocsr()

    def whiten(self, values: np.ndarray) -> np.ndarray:
        """Standardized conditional residuals U^T v (ordered), per column."""
        values = np.asarray(values, dtype=float)
        squeeze = values.ndim == 1
        v = values[self.structure.ordering].reshape(self.structure.n, -1)
        nbrs = self.structure.neighbors
        safe = np.where(nbrs >= 0, nbrs, 0)
        pred = np.einsum("nm,nms->ns", self.coefficients, v[safe])
        resid = (v - pred) / np.sqrt(self.cond_var)[:, None]
        return resid[:, 0] if squeeze else resid

    def loglik(self, values: np.ndarray) -> np.ndarray:
        """Gaussian log-density of one vector or each column of a matrix."""
        white = self.whiten(values)
        quad = np.sum(white**2, axis=0)
        n = self.structure.n
        return -0.5 * (n * np.log(2 * np.pi) - self.logdet_prec + quad)


def order_sites(
    distances: np.ndarray,
    sites: SpaceTimeSites,
    method: Ordering = "maxmin",
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Ordering of sites for the Vecchia approximation."""
    n = len(sites)
    if method == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        return rng.permutation(n)
    if method == "coordinate":
        return np.lexsort((sites.times, sites.coords[:, 1], sites.coords[:, 0]))
    if method != "maxmin":
        raise ValueError(f"Unknown ordering '{method}'")

    # Greedy max-min starting from the most central site
    order = np.empty(n, dtype=int)
    order[0] = int(np.argmin(distances.sum(axis=1)))
    min_dist = distances[order[0]].copy()
    min_dist[order[0]] = -np.inf
    for k in range(1, n):
        nxt = int(np.argmax(min_dist))
        order[k] = nxt
        min_dist = np.minimum(min_dist, distances[nxt])
        min_dist[order[: k + 1]] = -np.inf
    return order


def _site_distances(sites: SpaceTimeSites, params: KernelParams) -> np.ndarray:
    dist = pairwise_distance(sites, sites, params)
    dist = 0.5 * (dist + dist.T)
    off = ~np.eye(len(sites), dtype=bool)
    duplicates = off & (dist <= 0.0)
    if duplicates.any():
        logger.debug(
            f"Separating {duplicates.sum() // 2} duplicate site pairs by "
            f"{DUPLICATE_DISTANCE}"
        )
        dist[duplicates] = DUPLICATE_DISTANCE
    np.fill_diagonal(dist, 0.0)
    return dist


def vecchia_structure(
    sites: SpaceTimeSites,
    params: KernelParams,
    m: int,
    ordering: Ordering = "maxmin",
    rng: Optional[np.random.Generator] = None,
) -> VecchiaStructure:
    """
    Choose an ordering and the m nearest previously ordered sites per site.

    Args:
        sites: Sites of one score field
        params: Kernel whose scaled distance defines "nearest"
        m: Maximum conditioning-set size
        ordering: Ordering rule
        rng: Generator for the random ordering

    Returns:
        VecchiaStructure
    """
    if m < 1:
        raise ValueError(f"Neighbor count must be at least 1, got {m}")
    n = len(sites)
    width = max(min(m, n - 1), 0)
    if n == 0:
        return VecchiaStructure(np.zeros(0, dtype=int), np.zeros((0, 0), dtype=int))

    dist = _site_distances(sites, params)
    order = order_sites(dist, sites, ordering, rng)
    dist_ord = dist[np.ix_(order, order)]

    neighbors = np.full((n, width), -1, dtype=int)
    for k in range(1, n):
        prev = dist_ord[k, :k]
        if k <= width:
            chosen = np.arange(k)
        else:
            chosen = np.argpartition(prev, width - 1)[:width]
        chosen = chosen[np.lexsort((chosen, prev[chosen]))]
        neighbors[k, : len(chosen)] = chosen
    return VecchiaStructure(order, neighbors)


def _conditional_terms(
    cov_ord: np.ndarray, neighbors: np.ndarray, jitter: float
) -> tuple[np.ndarray, np.ndarray]:
    n, width = neighbors.shape
    variance = np.diag(cov_ord).copy() + jitter
    if width == 0:
        return np.zeros((n, 0)), variance

    valid = neighbors >= 0
    safe = np.where(valid, neighbors, 0)
    k_nn = cov_ord[safe[:, :, None], safe[:, None, :]]
    mask = valid[:, :, None] & valid[:, None, :]
    k_nn = np.where(mask, k_nn, 0.0)
    diag = np.arange(width)
    k_nn[:, diag, diag] = np.where(valid, k_nn[:, diag, diag] + jitter, 1.0)
    k_n = np.where(valid, cov_ord[np.arange(n)[:, None], safe], 0.0)

    coef = np.linalg.solve(k_nn, k_n[:, :, None])[:, :, 0]
    coef = np.where(valid, coef, 0.0)
    cond_var = variance - np.sum(k_n * coef, axis=1)
    return coef, cond_var


def vecchia_factor_from_structure(
    sites: SpaceTimeSites, params: KernelParams, structure: VecchiaStructure
) -> VecchiaFactor:
    """
    Vecchia factor for given kernel parameters on a fixed ordering/neighbor set.

    Raises:
        CokrigingError: If a conditional covariance is not positive definite even
            after adding a 1e-10 relative diagonal jitter
    """
    order = structure.ordering
    n = structure.n
    dist = _site_distances(sites, params)[np.ix_(order, order)]
    cov_ord = kernel(dist, params)
    np.fill_diagonal(cov_ord, params.variance)

    coef, cond_var = None, None
    for jitter in (0.0, JITTER * params.variance):
        try:
            coef, cond_var = _conditional_terms(cov_ord, structure.neighbors, jitter)
        except np.linalg.LinAlgError:
            coef, cond_var = None, None
        if cond_var is not None and np.all(np.isfinite(cond_var)):
            if np.all(cond_var > 1e-14 * params.variance):
                break
        logger.debug(f"Vecchia conditionals not positive definite at jitter {jitter}")
        coef, cond_var = None, None
    if cond_var is None:
        raise CokrigingError.not_positive_definite(
            "Vecchia conditional covariance",
            details=f"{n} sites, kernel {params}",
        )

    width = structure.neighbors.shape[1]
    inv_sd = 1.0 / np.sqrt(cond_var)
    rows = [np.arange(n)]
    cols = [np.arange(n)]
    data = [inv_sd]
    if width:
        valid = structure.neighbors >= 0
        rows.append(structure.neighbors[valid])
        cols.append(np.repeat(np.arange(n), width).reshape(n, width)[valid])
        data.append((-coef * inv_sd[:, None])[valid])
    U = sparse.csc_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    return VecchiaFactor(structure, coef, cond_var, U)


def vecchia_factor(
    sites: SpaceTimeSites,
    params: KernelParams,
    m: int,
    ordering: Ordering = "maxmin",
    rng: Optional[np.random.Generator] = None,
) -> VecchiaFactor:
    """
    Vecchia approximation of the precision matrix of a score field.

    Args:
        sites: Sites of the field
        params: Kernel parameters
        m: Conditioning-set size
        ordering: "maxmin", "coordinate" or "random"
        rng: Generator for the random ordering

    Returns:
        VecchiaFactor with Sigma^-1 ~= U U^T
    """
    structure = vecchia_structure(sites, params, m, ordering, rng)
    return vecchia_factor_from_structure(sites, params, structure)


def cg_solve(
    apply_A: Operator,
    b: np.ndarray,
    rel_tol: float = 1e-10,
    max_iter: Optional[int] = None,
    diagonal: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Conjugate-gradient solve of A x = b for symmetric positive definite A.

    Args:
        apply_A: Matrix-vector product with A
        b: Right-hand side
        rel_tol: Required relative residual ||A x - b|| / ||b||
        max_iter: Iteration cap (default: dimension)
        diagonal: Optional diagonal of A for Jacobi preconditioning

    Returns:
        Solution vector

    Raises:
        CokrigingError: On NaN residuals or when the cap is reached
    """
    b = np.asarray(b, dtype=float)
    dim = b.shape[0]
    max_iter = dim if max_iter is None else max_iter
    b_norm = float(np.linalg.norm(b))
    x = np.zeros(dim)
    if b_norm == 0.0:
        return x

    inv_diag = 1.0 / diagonal if diagonal is not None else None

    def precondition(r):
        return r * inv_diag if inv_diag is not None else r

    r = b.copy()
    z = precondition(r)
    p = z.copy()
    rz = float(r @ z)
    r_norm = b_norm
    for iteration in range(1, max_iter + 1):
        Ap = apply_A(p)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp) or pAp <= 0.0:
            raise CokrigingError.numeric_failure(
                "conjugate gradient", details=f"p'Ap = {pAp} at iteration {iteration}"
            )
        step = rz / pAp
        x += step * p
        r -= step * Ap
        r_norm = float(np.linalg.norm(r))
        if not np.isfinite(r_norm):
            raise CokrigingError.numeric_failure(
                "conjugate gradient", details=f"NaN residual at iteration {iteration}"
            )
        if r_norm <= rel_tol * b_norm:
            r = b - apply_A(x)
            r_norm = float(np.linalg.norm(r))
            if r_norm <= rel_tol * b_norm:
                logger.debug(f"CG converged in {iteration} iterations")
                return x
            z = precondition(r)
            rz = float(r @ z)
            p = z.copy()
            continue
        z = precondition(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new

    raise CokrigingError.not_converged("conjugate gradient", max_iter, r_norm / b_norm)


class _LanczosProcess:
    """Lanczos tridiagonalization with full re-orthogonalization."""

    def __init__(self, apply_A: Operator, start: np.ndarray, max_steps: int):
        self.apply_A = apply_A
        self.beta0 = float(np.linalg.norm(start))
        self.max_steps = max_steps
        self.basis = np.zeros((start.shape[0], max_steps))
        self.basis[:, 0] = start / self.beta0
        self.alphas: list[float] = []
        self.betas: list[float] = []
        self.exhausted = False
        self._scale = 0.0

    @property
    def k(self) -> int:
        return len(self.alphas)

    def step(self) -> None:
        k = self.k
        v = self.basis[:, k]
        w = self.apply_A(v)
        if not np.all(np.isfinite(w)):
            raise CokrigingError.numeric_failure("Lanczos", details="non-finite product")
        alpha = float(v @ w)
        w = w - alpha * v
        if k > 0:
            w -= self.betas[-1] * self.basis[:, k - 1]
        active = self.basis[:, : k + 1]
        for _ in range(2):
            w -= active @ (active.T @ w)
        self.alphas.append(alpha)
        self._scale = max(self._scale, abs(alpha))
        beta = float(np.linalg.norm(w))
        if self.k >= self.max_steps or beta <= 1e-10 * max(self._scale, 1e-300):
            self.exhausted = True
            return
        self.betas.append(beta)
        self.basis[:, k + 1] = w / beta

    def tridiagonal_eigh(self) -> tuple[np.ndarray, np.ndarray]:
        k = self.k
        T = np.diag(self.alphas)
        off = np.asarray(self.betas[: k - 1])
        T[np.arange(k - 1), np.arange(1, k)] = off
        T[np.arange(1, k), np.arange(k - 1)] = off
        return np.linalg.eigh(T)


def _dense_matrix(apply_A: Operator, dim: int) -> np.ndarray:
    eye = np.eye(dim)
    mat = np.column_stack([apply_A(eye[:, j]) for j in range(dim)])
    return 0.5 * (mat + mat.T)


def lanczos_sqrt_sample(
    apply_precision: Operator,
    dim: int,
    rng: np.random.Generator,
    tol: float = 1e-6,
    max_steps: Optional[int] = None,
) -> np.ndarray:
    """
    Draw v ~ N(0, Q^-1) given only products with the precision Q.

    Runs Lanczos on Q started at a standard normal w and returns
    ||w|| V T^{-1/2} e1, stopping once the draw changes by at most tol in the
    sup norm over 10 iterations or the Krylov space is exhausted.

    Raises:
        CokrigingError: If T loses positive definiteness and dim exceeds the dense
            fallback size
    """
    w = rng.standard_normal(dim)
    if dim == 0:
        return w
    max_steps = dim if max_steps is None else min(max_steps, dim)
    process = _LanczosProcess(apply_precision, w, max_steps)
    history: deque = deque(maxlen=11)
    draw = np.zeros(dim)
    while True:
        process.step()
        vals, vecs = process.tridiagonal_eigh()
        if vals.min() <= 0.0:
            if dim <= DENSE_FALLBACK_DIM:
                logger.warning("Lanczos breakdown; drawing with a dense square root")
                vals_d, vecs_d = np.linalg.eigh(_dense_matrix(apply_precision, dim))
                if vals_d.min() <= 0.0:
                    raise CokrigingError.not_positive_definite("precision operator")
                return vecs_d @ ((vecs_d.T @ w) / np.sqrt(vals_d))
            raise CokrigingError.numeric_failure(
                "Lanczos", details="tridiagonal matrix lost positive definiteness"
            )
        coef = vecs @ (vecs[0, :] / np.sqrt(vals))
        draw = process.beta0 * (process.basis[:, : process.k] @ coef)
        history.append(draw)
        if process.exhausted:
            break
        if len(history) == 11 and np.max(np.abs(draw - history[0])) <= tol:
            break
    logger.debug(f"Lanczos draw used {process.k} iterations (dim {dim})")
    return draw


def lanczos_quadform(
    apply_M: Operator, v: np.ndarray, rel_tol: float = 1e-12, max_steps: int = None
) -> float:
    """Gauss-quadrature estimate of v^T M^-1 v from Lanczos on M."""
    v = np.asarray(v, dtype=float)
    v_norm2 = float(v @ v)
    if v_norm2 == 0.0:
        return 0.0
    dim = v.shape[0]
    max_steps = dim if max_steps is None else min(max_steps, dim)
    process = _LanczosProcess(apply_M, v, max_steps)
    previous = None
    estimate = 0.0
    while True:
        process.step()
        vals, vecs = process.tridiagonal_eigh()
        if vals.min() <= 0.0:
            raise CokrigingError.not_positive_definite("quadratic-form operator")
        estimate = v_norm2 * float(np.sum(vecs[0, :] ** 2 / vals))
        if process.exhausted:
            break
        if previous is not None and abs(estimate - previous) <= rel_tol * abs(estimate):
            break
        previous = estimate
    return estimate


def logdet_hutchinson(
    apply_M: Operator,
    dim: int,
    n_probes: int,
    rng: np.random.Generator,
    max_steps: int = 100,
    rel_tol: float = 1e-8,
) -> float:
    """
    Stochastic Lanczos quadrature estimate of log|M| with Rademacher probes.

    Returns:
        Average over probes of z^T log(M) z
    """
    if dim == 0:
        return 0.0
    steps = min(max_steps, dim)
    estimates = np.empty(n_probes)
    for probe in range(n_probes):
        z = rng.integers(0, 2, size=dim) * 2.0 - 1.0
        process = _LanczosProcess(apply_M, z, steps)
        previous = None
        estimate = 0.0
        while True:
            process.step()
            vals, vecs = process.tridiagonal_eigh()
            if vals.min() <= 0.0:
                raise CokrigingError.not_positive_definite("log-determinant operator")
            estimate = dim * float(np.sum(vecs[0, :] ** 2 * np.log(vals)))
            if process.exhausted:
                break
            if previous is not None and abs(estimate - previous) <= rel_tol * max(
                abs(estimate), 1.0
            ):
                break
            previous = estimate
        estimates[probe] = estimate
    return float(estimates.mean())
