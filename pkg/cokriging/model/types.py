"""
Domain types: profiles, model parameters and latent samples.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.linalg import block_diag

from cokriging.spatial.covariance import CoordinateMode, KernelParams, SpaceTimeSites
from cokriging.splines.basis import BasisSystem, evaluate

logger = logging.getLogger(__name__)

DAYS_PER_YEAR = 365.25


@dataclass(eq=False)
class Profile:
    """
    Measurements of one space-time site.

    Attributes:
        profile_id: Identifier carried through files
        coords: (lon, lat) in degrees or Euclidean (x, y)
        time: Time in days
        y_pressures, y_values: Response measurements (may be empty)
        x_pressures, x_values: Per predictor channel measurements
    """

    profile_id: str
    coords: tuple[float, float]
    time: float
    y_pressures: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    x_pressures: list[np.ndarray] = field(default_factory=list)
    x_values: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.coords = (float(self.coords[0]), float(self.coords[1]))
        self.time = float(self.time)
        self.y_pressures, self.y_values = _sorted_pair(
            self.y_pressures, self.y_values, "Y"
        )
        if len(self.x_pressures) != len(self.x_values):
            raise ValueError("Predictor pressures and values differ in channel count")
        pairs = [
            _sorted_pair(p, v, f"X{k + 1}")
            for k, (p, v) in enumerate(zip(self.x_pressures, self.x_values))
        ]
        self.x_pressures = [p for p, _ in pairs]
        self.x_values = [v for _, v in pairs]

    @property
    def n_channels(self) -> int:
        return len(self.x_values)

    @property
    def has_response(self) -> bool:
        return len(self.y_values) > 0

    @property
    def n_obs(self) -> int:
        return len(self.y_values) + sum(len(v) for v in self.x_values)

    def with_channels(self, n_channels: int) -> "Profile":
        """Pad missing predictor channels with empty measurement sets."""
        missing = n_channels - self.n_channels
        if missing <= 0:
            return self
        return replace(
            self,
            x_pressures=self.x_pressures + [np.zeros(0)] * missing,
            x_values=self.x_values + [np.zeros(0)] * missing,
        )

    def without_response(self) -> "Profile":
        return replace(self, y_pressures=np.zeros(0), y_values=np.zeros(0))


def _sorted_pair(pressures, values, channel: str) -> tuple[np.ndarray, np.ndarray]:
    pressures = np.asarray(pressures, dtype=float).ravel()
    values = np.asarray(values, dtype=float).ravel()
    if pressures.shape != values.shape:
        raise ValueError(
            f"Channel {channel}: {len(pressures)} pressures but {len(values)} values"
        )
    order = np.argsort(pressures, kind="stable")
    return pressures[order], values[order]


def profile_sites(profiles: list[Profile], mode: CoordinateMode) -> SpaceTimeSites:
    if not profiles:
        return SpaceTimeSites(np.zeros((0, 2)), np.zeros(0), mode)
    return SpaceTimeSites(
        np.array([p.coords for p in profiles]),
        np.array([p.time for p in profiles]),
        mode,
    )


@dataclass(frozen=True)
class Penalties:
    """Smoothing parameters of the five penalized coefficient blocks."""

    mean_y: float = 1e-3
    mean_x: float = 1e-3
    theta_e: float = 1e-3
    theta_x: float = 1e-3
    lam: float = 1e-3

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"Penalty {name} must be non-negative, got {value}")


@dataclass(eq=False)
class ClusterParams:
    """
    Spline coefficients and score-field kernels of one cluster.

    Attributes:
        upsilon_y: P x (2R+1) seasonal-mean coefficients of the response
        upsilon_x: KP x (2R+1) seasonal-mean coefficients of the predictors
        theta_x: KP x Q1 predictor principal component coefficients
        theta_e: P x Q2 residual principal component coefficients
        lam: P x Q1 coefficients of the regression operator applied to theta_x
        alpha_kernels: Q1 kernels of the predictor score fields
        eta_kernels: Q2 kernels of the residual score fields
    """

    upsilon_y: np.ndarray
    upsilon_x: np.ndarray
    theta_x: np.ndarray
    theta_e: np.ndarray
    lam: np.ndarray
    alpha_kernels: list[KernelParams]
    eta_kernels: list[KernelParams]

    @property
    def kernels(self) -> list[KernelParams]:
        return list(self.alpha_kernels) + list(self.eta_kernels)

    @property
    def score_variances(self) -> np.ndarray:
        return np.array([k.variance for k in self.kernels])

    def copy(self) -> "ClusterParams":
        return ClusterParams(
            upsilon_y=self.upsilon_y.copy(),
            upsilon_x=self.upsilon_x.copy(),
            theta_x=self.theta_x.copy(),
            theta_e=self.theta_e.copy(),
            lam=self.lam.copy(),
            alpha_kernels=list(self.alpha_kernels),
            eta_kernels=list(self.eta_kernels),
        )


@dataclass(eq=False)
class ModelParams:
    """
    Full parameter set of the mixture model.

    Attributes:
        G, Q1, Q2, R, K: Clusters, predictor PCs, residual PCs, harmonics, channels
        clusters: Per-cluster parameters
        sigma2_y: Response noise variance
        sigma2_x: Per-channel predictor noise variances
        xi: Potts coupling strength
        penalties: Smoothing parameters
    """

    G: int
    Q1: int
    Q2: int
    R: int
    K: int
    clusters: list[ClusterParams]
    sigma2_y: float
    sigma2_x: np.ndarray
    xi: float
    penalties: Penalties = field(default_factory=Penalties)

    def __post_init__(self):
        self.sigma2_x = np.asarray(self.sigma2_x, dtype=float).reshape(self.K)
        if len(self.clusters) != self.G:
            raise ValueError(f"Expected {self.G} clusters, got {len(self.clusters)}")
        if self.sigma2_y <= 0 or np.any(self.sigma2_x <= 0):
            raise ValueError("Noise variances must be positive")
        if self.xi < 0:
            raise ValueError(f"xi must be non-negative, got {self.xi}")

    @property
    def n_scores(self) -> int:
        return self.Q1 + self.Q2

    def copy(self) -> "ModelParams":
        return ModelParams(
            G=self.G,
            Q1=self.Q1,
            Q2=self.Q2,
            R=self.R,
            K=self.K,
            clusters=[c.copy() for c in self.clusters],
            sigma2_y=float(self.sigma2_y),
            sigma2_x=self.sigma2_x.copy(),
            xi=float(self.xi),
            penalties=self.penalties,
        )


@dataclass(eq=False)
class LatentSample:
    """
    One Monte Carlo draw of labels and scores with its importance weight.

    Attributes:
        z: (n,) zero-based labels
        alpha: (n, Q1) predictor scores of each site in its own cluster
        eta: (n, Q2) residual scores of each site in its own cluster
        log_weight: Unnormalized log importance weight
        norm_weight: Self-normalized weight
        loglik: log f(X, Y | z) of this draw
    """

    z: np.ndarray
    alpha: np.ndarray
    eta: np.ndarray
    log_weight: float = 0.0
    norm_weight: float = 1.0
    loglik: float = 0.0


def seasonal_covariates(t: float, R: int) -> np.ndarray:
    """
    Harmonic covariates (1, sin(2 pi l t / 365.25), ..., cos(2 pi l t / 365.25)).

    Sines for l = 1..R come first, then cosines.
    """
    if R < 0:
        raise ValueError(f"R must be non-negative, got {R}")
    phase = 2.0 * np.pi * np.arange(1, R + 1) * float(t) / DAYS_PER_YEAR
    return np.concatenate([[1.0], np.sin(phase), np.cos(phase)])


@dataclass(frozen=True, eq=False)
class DesignMatrices:
    """Basis evaluations of one profile and their seasonal Kronecker expansions."""

    B_y: np.ndarray
    B_x: np.ndarray
    B_y_seasonal: np.ndarray
    B_x_seasonal: np.ndarray


def design_matrices(profile: Profile, basis: BasisSystem, R: int) -> DesignMatrices:
    """
    Design matrices of a profile.

    Returns:
        B_y (n_y x P), block-diagonal B_x (sum n_xk x KP), and their row-wise
        Kronecker products with delta(t)

    Raises:
        ValueError: If a pressure lies outside the basis domain
    """
    delta = seasonal_covariates(profile.time, R)[None, :]
    b_y = evaluate(basis, profile.y_pressures).reshape(-1, basis.P)
    blocks = [evaluate(basis, p).reshape(-1, basis.P) for p in profile.x_pressures]
    b_x = block_diag(*blocks) if blocks else np.zeros((0, 0))
    return DesignMatrices(
        B_y=b_y,
        B_x=b_x,
        B_y_seasonal=np.kron(b_y, delta),
        B_x_seasonal=np.kron(b_x, delta),
    )


@dataclass(frozen=True, eq=False)
class PreparedProfile:
    """
    Per-profile quantities reused by every likelihood evaluation.

    Attributes:
        y: Response values
        B_y: Response basis evaluations
        x: Per-channel predictor values
        B_x: Per-channel basis evaluations
        delta: Seasonal covariates
    """

    y: np.ndarray
    B_y: np.ndarray
    x: list[np.ndarray]
    B_x: list[np.ndarray]
    delta: np.ndarray

    @property
    def has_response(self) -> bool:
        return len(self.y) > 0

    @property
    def has_data(self) -> bool:
        return len(self.y) > 0 or any(len(v) for v in self.x)


def prepare_profiles(
    profiles: list[Profile], basis: BasisSystem, R: int, K: Optional[int] = None
) -> list[PreparedProfile]:
    """Evaluate bases and seasonal covariates once per profile."""
    K = max((p.n_channels for p in profiles), default=0) if K is None else K
    prepared = []
    for profile in profiles:
        profile = profile.with_channels(K)
        if profile.n_channels > K:
            raise ValueError(
                f"Profile {profile.profile_id} has {profile.n_channels} channels, "
                f"model has {K}"
            )
        prepared.append(
            PreparedProfile(
                y=profile.y_values,
                B_y=evaluate(basis, profile.y_pressures).reshape(-1, basis.P),
                x=list(profile.x_values),
                B_x=[
                    evaluate(basis, p).reshape(-1, basis.P)
                    for p in profile.x_pressures
                ],
                delta=seasonal_covariates(profile.time, R),
            )
        )
    return prepared
