"""
Space-time covariance kernels for the score random fields.

Distances combine a (possibly deformed) spatial part scaled by the spatial
range and an absolute time difference scaled by the temporal range. Spatial
coordinates are either (lon, lat) in degrees, mapped to the unit sphere in 3-D
chordal space, or raw Euclidean coordinates.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import gamma, kv

logger = logging.getLogger(__name__)

CoordinateMode = Literal["sphere", "euclidean"]

SMOOTHNESS_BOUNDS = (0.25, 3.5)


@dataclass(frozen=True)
class KernelParams:
    """
    Parameters of one stationary (optionally deformed) space-time kernel.

    Attributes:
        variance: Marginal variance sigma^2
        range_x: Spatial range kappa_x
        range_t: Temporal range kappa_t
        smoothness: Matern smoothness nu (0.5 for the exponential kernel)
        deform_weights: Weights of the five degree-2 spherical-harmonic gradients
        kind: "matern" or "exponential"
    """

    variance: float = 1.0
    range_x: float = 0.1
    range_t: float = 30.0
    smoothness: float = 0.5
    deform_weights: tuple[float, ...] = field(default=(0.0,) * 5)
    kind: Literal["matern", "exponential"] = "exponential"

    def __post_init__(self):
        for name in ("variance", "range_x", "range_t", "smoothness"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"KernelParams.{name} must be positive, got {value}")
        if len(self.deform_weights) != 5:
            raise ValueError(
                f"Expected 5 deformation weights, got {len(self.deform_weights)}"
            )
        if self.kind == "exponential" and self.smoothness != 0.5:
            raise ValueError("Exponential kernel requires smoothness 0.5")
        object.__setattr__(
            self, "deform_weights", tuple(float(w) for w in self.deform_weights)
        )

    @property
    def deformed(self) -> bool:
        return any(w != 0.0 for w in self.deform_weights)

    def with_variance(self, variance: float) -> "KernelParams":
        return replace(self, variance=float(variance))


@dataclass(frozen=True, eq=False)
class SpaceTimeSites:
    """
    A set of space-time points.

    Attributes:
        coords: (n, 2) array of (lon, lat) degrees or Euclidean coordinates
        times: (n,) array of times in days
        mode: Coordinate mode
    """

    coords: np.ndarray
    times: np.ndarray
    mode: CoordinateMode = "sphere"

    def __post_init__(self):
        coords = np.atleast_2d(np.asarray(self.coords, dtype=float))
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        if coords.shape[0] == 0:
            coords = coords.reshape(0, 2)
        if coords.shape[0] != times.shape[0]:
            raise ValueError(
                f"Got {coords.shape[0]} coordinates but {times.shape[0]} times"
            )
        if self.mode == "sphere" and len(coords):
            lon, lat = coords[:, 0], coords[:, 1]
            if np.any(np.abs(lat) > 90.0) or np.any((lon < -180.0) | (lon > 360.0)):
                raise ValueError("Latitude must be in [-90, 90], longitude in [-180, 360]")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "times", times)

    def __len__(self) -> int:
        return self.coords.shape[0]

    def subset(self, index) -> "SpaceTimeSites":
        return SpaceTimeSites(self.coords[index], self.times[index], self.mode)

    def concat(self, other: "SpaceTimeSites") -> "SpaceTimeSites":
        if other.mode != self.mode:
            raise ValueError("Cannot combine sites with different coordinate modes")
        return SpaceTimeSites(
            np.vstack([self.coords, other.coords]),
            np.concatenate([self.times, other.times]),
            self.mode,
        )


def lonlat_to_unit(coords: np.ndarray) -> np.ndarray:
    """Map (lon, lat) degrees to points on the unit sphere."""
    lon = np.radians(coords[:, 0])
    lat = np.radians(coords[:, 1])
    return np.column_stack(
        [np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)]
    )


def harmonic_gradients(unit: np.ndarray) -> np.ndarray:
    """
    Surface gradients of the five real degree-2 spherical harmonics.

    Uses the homogeneous harmonic polynomials xy, yz, 2z^2 - x^2 - y^2, xz and
    x^2 - y^2; for those, the tangential gradient is grad f - 2 f u.

    Returns:
        (n, 5, 3) array of tangential gradient vectors
    """
    x, y, z = unit[:, 0], unit[:, 1], unit[:, 2]
    zeros = np.zeros_like(x)
    values = np.stack([x * y, y * z, 2 * z**2 - x**2 - y**2, x * z, x**2 - y**2], 1)
    ambient = np.stack(
        [
            np.stack([y, x, zeros], 1),
            np.stack([zeros, z, y], 1),
            np.stack([-2 * x, -2 * y, 4 * z], 1),
            np.stack([z, zeros, x], 1),
            np.stack([2 * x, -2 * y, zeros], 1),
        ],
        1,
    )
    return ambient - 2.0 * values[:, :, None] * unit[:, None, :]


def embed(sites: SpaceTimeSites, params: KernelParams) -> np.ndarray:
    """Spatial embedding x + Phi(x) used by the distance."""
    if sites.mode == "euclidean":
        if params.deformed:
            raise ValueError("Deformation is only available in sphere mode")
        return sites.coords
    unit = lonlat_to_unit(sites.coords)
    if not params.deformed:
        return unit
    weights = np.asarray(params.deform_weights)
    return unit + np.einsum("m,nmk->nk", weights, harmonic_gradients(unit))


def pairwise_distance(
    sites_a: SpaceTimeSites, sites_b: SpaceTimeSites, params: KernelParams
) -> np.ndarray:
    """Scaled space-time distances between every pair of sites."""
    spatial = cdist(embed(sites_a, params), embed(sites_b, params))
    temporal = np.abs(sites_a.times[:, None] - sites_b.times[None, :])
    return spatial / params.range_x + temporal / params.range_t


def deformed_distance(
    s: tuple, s_prime: tuple, params: KernelParams, mode: CoordinateMode = "sphere"
) -> float:
    """
    Distance between two space-time points given as (coord_1, coord_2, t).

    Raises:
        ValueError: For invalid latitude/longitude in sphere mode
    """
    a = SpaceTimeSites(np.array([s[:2]]), np.array([s[2]]), mode)
    b = SpaceTimeSites(np.array([s_prime[:2]]), np.array([s_prime[2]]), mode)
    return float(pairwise_distance(a, b, params)[0, 0])


def kernel(d, params: KernelParams):
    """
    Matern covariance normalized so that kernel(0) equals the variance.

    Args:
        d: Scalar or array of non-negative scaled distances
        params: Kernel parameters

    Returns:
        Covariance values with the shape of d
    """
    d = np.asarray(d, dtype=float)
    nu = params.smoothness
    if params.kind == "exponential" or nu == 0.5:
        out = params.variance * np.exp(-d)
    else:
        out = np.full(d.shape, params.variance)
        positive = d > 1e-12
        dp = d[positive]
        out[positive] = (
            params.variance * 2.0 ** (1.0 - nu) / gamma(nu) * dp**nu * kv(nu, dp)
        )
        # kv underflows to zero far away; nan only appears past that point
        out = np.nan_to_num(out, nan=0.0)
    return out if out.ndim else float(out)


def cross_cov(
    sites_a: SpaceTimeSites, sites_b: SpaceTimeSites, params: KernelParams
) -> np.ndarray:
    return kernel(pairwise_distance(sites_a, sites_b, params), params)


def cov_matrix(
    sites: SpaceTimeSites, params: KernelParams, nugget: float = 0.0
) -> np.ndarray:
    """
    Covariance matrix of the field over the given sites.

    Returns:
        Symmetric (n, n) matrix with diagonal variance + nugget
    """
    cov = cross_cov(sites, sites, params)
    cov = 0.5 * (cov + cov.T)
    np.fill_diagonal(cov, params.variance + nugget)
    return cov


def domain_diameter(sites: SpaceTimeSites) -> float:
    """Bounding-box diagonal of the spatial embedding (chordal in sphere mode)."""
    if len(sites) < 2:
        return 1.0
    points = (
        lonlat_to_unit(sites.coords) if sites.mode == "sphere" else sites.coords
    )
    lo, hi = points.min(axis=0), points.max(axis=0)
    diameter = float(np.linalg.norm(hi - lo))
    return diameter if diameter > 0 else 1.0
