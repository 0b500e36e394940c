"""
Cubic B-spline basis along pressure.

Builds clamped cubic B-spline bases with uniform interior knots, their Gram and
second-derivative penalty matrices, and the orthonormalization step that keeps
principal component coefficients orthonormal under the L2 inner product.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import linalg
from scipy.interpolate import BSpline

logger = logging.getLogger(__name__)

DEGREE = 3

# Four Gauss-Legendre nodes per knot span integrate degree-7 polynomials exactly
_GL_NODES, _GL_WEIGHTS = leggauss(4)


@dataclass(frozen=True, eq=False)
class BasisSystem:
    """
    Clamped cubic B-spline basis on [domain_lo, domain_hi].

    Attributes:
        domain_lo: Lower end of the pressure domain
        domain_hi: Upper end of the pressure domain
        interior_knots: Sorted interior knot locations
        knots: Full clamped knot vector
        gram: P x P matrix of integrated basis products
        penalty: P x P matrix of integrated second-derivative products
    """

    domain_lo: float
    domain_hi: float
    interior_knots: np.ndarray
    knots: np.ndarray = field(repr=False)
    gram: np.ndarray = field(repr=False)
    penalty: np.ndarray = field(repr=False)
    degree: int = DEGREE

    @property
    def P(self) -> int:
        """Basis dimension."""
        return len(self.knots) - self.degree - 1

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all((p >= self.domain_lo) & (p <= self.domain_hi)))


def _spline_family(knots: np.ndarray, degree: int = DEGREE) -> BSpline:
    n_basis = len(knots) - degree - 1
    return BSpline(knots, np.eye(n_basis), degree, extrapolate=False)


def _span_quadrature(knots: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights over every non-empty knot span."""
    breaks = np.unique(knots)
    lo, hi = breaks[:-1], breaks[1:]
    half = 0.5 * (hi - lo)
    nodes = (lo + half)[:, None] + half[:, None] * _GL_NODES[None, :]
    weights = half[:, None] * _GL_WEIGHTS[None, :]
    return nodes.ravel(), weights.ravel()


def build_basis(
    domain_lo: float, domain_hi: float, n_interior_knots: int
) -> BasisSystem:
    """
    Build a clamped cubic B-spline basis with uniformly spaced interior knots.

    Args:
        domain_lo: Lower pressure bound
        domain_hi: Upper pressure bound
        n_interior_knots: Number of interior knots (P = n_interior_knots + 4)

    Returns:
        BasisSystem with exact Gram and penalty matrices

    Raises:
        ValueError: If the domain is empty or no interior knot is requested
    """
    if not domain_hi > domain_lo:
        raise ValueError(
            f"Domain length must be positive, got [{domain_lo}, {domain_hi}]"
        )
    if n_interior_knots < 1:
        raise ValueError(f"Need at least 1 interior knot, got {n_interior_knots}")

    interior = np.linspace(domain_lo, domain_hi, n_interior_knots + 2)[1:-1]
    knots = np.concatenate(
        [
            np.full(DEGREE + 1, float(domain_lo)),
            interior,
            np.full(DEGREE + 1, float(domain_hi)),
        ]
    )

    family = _spline_family(knots)
    nodes, weights = _span_quadrature(knots)
    values = np.nan_to_num(family(nodes))
    second = np.nan_to_num(family.derivative(2)(nodes))

    gram = (values * weights[:, None]).T @ values
    penalty = (second * weights[:, None]).T @ second
    gram = 0.5 * (gram + gram.T)
    penalty = 0.5 * (penalty + penalty.T)

    basis = BasisSystem(
        domain_lo=float(domain_lo),
        domain_hi=float(domain_hi),
        interior_knots=interior,
        knots=knots,
        gram=gram,
        penalty=penalty,
    )
    logger.debug(
        f"Built cubic basis with P={basis.P} on [{domain_lo}, {domain_hi}]"
    )
    return basis


def evaluate(basis: BasisSystem, p) -> np.ndarray:
    """
    Evaluate all basis functions at one or more pressures.

    Args:
        basis: Basis system
        p: Scalar pressure or 1-D array of pressures

    Returns:
        Length-P vector for a scalar input, otherwise an (n, P) matrix

    Raises:
        ValueError: If any pressure lies outside the basis domain
    """
    scalar = np.ndim(p) == 0
    pts = np.atleast_1d(np.asarray(p, dtype=float))
    if not basis.contains(pts):
        bad = pts[(pts < basis.domain_lo) | (pts > basis.domain_hi)]
        raise ValueError(
            f"Pressure {bad[0]} outside basis domain "
            f"[{basis.domain_lo}, {basis.domain_hi}]"
        )
    if len(pts) == 0:
        return np.zeros((0, basis.P))

    values = BSpline.design_matrix(pts, basis.knots, basis.degree).toarray()
    return values[0] if scalar else values


def evaluate_second_derivative(basis: BasisSystem, p) -> np.ndarray:
    """Second derivatives of every basis function at the given pressures."""
    pts = np.atleast_1d(np.asarray(p, dtype=float))
    return np.nan_to_num(_spline_family(basis.knots).derivative(2)(pts))


def penalty_quadform(basis: BasisSystem, coef: np.ndarray) -> float:
    """
    Integrated squared second derivative of the spline with given coefficients.

    Raises:
        ValueError: If the coefficient length differs from P
    """
    coef = np.asarray(coef, dtype=float)
    if coef.shape != (basis.P,):
        raise ValueError(f"Expected {basis.P} coefficients, got shape {coef.shape}")
    return float(max(coef @ basis.penalty @ coef, 0.0))


def block_gram(basis: BasisSystem, n_blocks: int) -> np.ndarray:
    """Gram matrix I_K kron J for K stacked channels."""
    return np.kron(np.eye(n_blocks), basis.gram)


def orthonormal_basis_coefficients(basis: BasisSystem) -> np.ndarray:
    """
    Coefficients of the L2 Gram-Schmidt orthonormalization of the basis.

    Column j holds the B-spline coefficients of the j-th orthonormal function,
    built from b_1, ..., b_j in order (upper-triangular).
    """
    lower = linalg.cholesky(basis.gram, lower=True)
    return linalg.solve_triangular(lower.T, np.eye(basis.P), lower=False)


def _rotate_block(
    theta: np.ndarray, score_cov: np.ndarray, gram: np.ndarray, label: str
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Orthonormalize one coefficient block; returns (theta', rotation, variances)."""
    n_cols = theta.shape[1]
    if n_cols == 0:
        return theta.copy(), np.zeros((0, 0)), np.zeros(0)

    cov = 0.5 * (score_cov + score_cov.T)
    vals, vecs = linalg.eigh(cov)
    scale = max(float(np.trace(cov)), np.finfo(float).tiny)
    if vals.min() < -1e-10 * scale:
        raise ValueError(
            f"Score covariance for {label} is not PSD "
            f"(smallest eigenvalue {vals.min():.3e})"
        )
    if vals.min() < 0:
        logger.debug(f"Clipping tiny negative score variances for {label}")
        cov = (vecs * np.clip(vals, 0.0, None)) @ vecs.T

    try:
        upper = linalg.cholesky(gram, lower=False)
    except linalg.LinAlgError as e:
        raise ValueError(f"Gram matrix for {label} is singular") from e

    # R theta = Q S, so R theta cov theta' R' = Q (S cov S') Q'
    q_mat, s_mat = linalg.qr(upper @ theta, mode="economic")
    inner = s_mat @ cov @ s_mat.T
    d_vals, v_mat = linalg.eigh(0.5 * (inner + inner.T))
    order = np.argsort(d_vals)[::-1]
    d_vals, v_mat = np.clip(d_vals[order], 0.0, None), v_mat[:, order]

    theta_new = linalg.solve_triangular(upper, q_mat @ v_mat, lower=False)
    rotation = v_mat.T @ s_mat

    for col in range(n_cols):
        nonzero = np.flatnonzero(np.abs(theta_new[:, col]) > 1e-12)
        if len(nonzero) and theta_new[nonzero[0], col] < 0:
            theta_new[:, col] *= -1.0
            rotation[col, :] *= -1.0

    return theta_new, rotation, d_vals


def orthonormalize(
    theta_x: np.ndarray,
    theta_e: np.ndarray,
    lambda_mat: np.ndarray,
    score_cov_x: np.ndarray,
    score_cov_e: np.ndarray,
    gram: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
    """
    Enforce orthonormal principal component coefficients.

    Rotates the predictor and residual coefficient blocks so that
    theta_x' (I_K kron J) theta_x' = I and theta_e' J theta_e' = I, orders the
    columns by descending rotated score variance and fixes signs so the first
    nonzero entry of each column is positive. Lambda absorbs the inverse of the
    predictor-score rotation so the fitted regression operator is unchanged.

    Args:
        theta_x: KP x Q1 predictor coefficients
        theta_e: P x Q2 residual coefficients
        lambda_mat: P x Q1 regression coefficients
        score_cov_x: Q1 x Q1 empirical covariance of predictor scores
        score_cov_e: Q2 x Q2 empirical covariance of residual scores
        gram: P x P basis Gram matrix J

    Returns:
        Tuple (theta_x', theta_e', lambda', rotations) where rotations holds
        "alpha" and "eta" matrices W with new scores = W @ old scores, and the
        rotated score variances under "alpha_var" and "eta_var"

    Raises:
        ValueError: If the Gram matrix is singular or a score covariance is not PSD
    """
    n_basis = gram.shape[0]
    n_channels = theta_x.shape[0] // n_basis if theta_x.size else 0

    if theta_x.shape[1] and n_channels:
        theta_x_new, rot_x, var_x = _rotate_block(
            theta_x, score_cov_x, np.kron(np.eye(n_channels), gram), "alpha"
        )
        lambda_new = linalg.solve(rot_x.T, lambda_mat.T).T
    else:
        theta_x_new, rot_x, var_x = theta_x.copy(), np.eye(theta_x.shape[1]), np.zeros(0)
        lambda_new = lambda_mat.copy()

    theta_e_new, rot_e, var_e = _rotate_block(theta_e, score_cov_e, gram, "eta")

    rotations = {
        "alpha": rot_x,
        "eta": rot_e,
        "alpha_var": var_x,
        "eta_var": var_e,
    }
    return theta_x_new, theta_e_new, lambda_new, rotations
