"""
Simultaneous confidence bands for predicted curves.
"""

import logging

import numpy as np
from scipy import linalg

logger = logging.getLogger(__name__)

DEGENERATE_SD = 1e-12


def simultaneous_band(
    score_cov: np.ndarray,
    coef_matrix: np.ndarray,
    level: float = 0.95,
    n_sim: int = 1000,
    rng: np.random.Generator = None,
) -> float:
    """
    Radius of a sup-norm simultaneous band for a Gaussian curve.

    The curve deviation is coef_matrix @ s with s ~ N(0, score_cov). The radius
    is the level-quantile of max_p |deviation(p)| / sd(p) over simulated draws;
    the band is mean(p) +/- radius * sd(p).

    Args:
        score_cov: (q, q) posterior covariance of the scores
        coef_matrix: (m, q) map from scores to the curve on an m-point grid
        level: Coverage level (default 0.95)
        n_sim: Number of simulated curves (default 1000)
        rng: Random generator

    Returns:
        Band radius; 0.0 when the posterior variance is degenerate

    Raises:
        ValueError: If the level is outside (0, 1) or shapes disagree
    """
    if not 0 < level < 1:
        raise ValueError(f"Level must be between 0 and 1, got {level}")
    if n_sim < 1:
        raise ValueError(f"Need at least one simulation, got {n_sim}")
    score_cov = np.atleast_2d(np.asarray(score_cov, dtype=float))
    coef_matrix = np.atleast_2d(np.asarray(coef_matrix, dtype=float))
    if coef_matrix.shape[1] != score_cov.shape[0]:
        raise ValueError(
            f"Coefficient matrix has {coef_matrix.shape[1]} columns, "
            f"covariance is {score_cov.shape[0]}-dimensional"
        )
    rng = rng if rng is not None else np.random.default_rng()

    # Eigen decomposition gives a square root that tolerates singular covariances
    vals, vecs = linalg.eigh(0.5 * (score_cov + score_cov.T))
    vals = np.maximum(vals, 0.0)
    root = coef_matrix @ (vecs * np.sqrt(vals))
    sd = np.sqrt(np.sum(root**2, axis=1))

    if len(sd) == 0 or np.all(sd <= DEGENERATE_SD):
        logger.warning("Posterior curve variance is zero, using a zero-width band")
        return 0.0

    deviations = rng.standard_normal((n_sim, root.shape[1])) @ root.T
    scaled = np.zeros_like(deviations)
    active = sd > DEGENERATE_SD
    scaled[:, active] = np.abs(deviations[:, active]) / sd[active]
    return float(np.quantile(scaled.max(axis=1), level))


def band_limits(
    mean: np.ndarray, sd: np.ndarray, radius: float
) -> tuple[np.ndarray, np.ndarray]:
    """Lower and upper band curves mean -/+ radius * sd."""
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    return mean - radius * sd, mean + radius * sd
