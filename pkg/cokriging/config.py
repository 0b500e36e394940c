"""
Declarative configuration.

Every command reads a TOML file validated by one of the pydantic models below.
Unknown keys are rejected and validation failures surface as configuration
errors (exit status 2).
"""

import logging

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Literal, Optional, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from cokriging.errors import CokrigingError
from cokriging.model.likelihood import SolverOptions
from cokriging.model.types import Penalties

logger = logging.getLogger(__name__)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BasisConfig(StrictModel):
    domain_lo: float = 0.0
    domain_hi: float = 1.0
    n_interior_knots: int = Field(8, ge=1)

    @model_validator(mode="after")
    def check_domain(self):
        if not self.domain_hi > self.domain_lo:
            raise ValueError("domain_hi must exceed domain_lo")
        return self


class GraphConfig(StrictModel):
    k: int = Field(15, ge=1)
    distance_weights: tuple[float, float, float] = (1.0, 3.0, 12.0)
    weighting: Literal["inverse_distance", "unit"] = "inverse_distance"


class KernelConfig(StrictModel):
    kind: Literal["matern", "exponential"] = "exponential"
    smoothness: float = Field(0.5, gt=0)
    estimate_smoothness: bool = False
    smoothness_bounds: tuple[float, float] = (0.25, 3.5)
    estimate_deformation: bool = False
    deformation_bound: float = Field(0.5, gt=0)
    range_fraction: float = Field(0.1, gt=0)
    max_evals: int = Field(200, ge=1)

    @model_validator(mode="after")
    def check_kind(self):
        if self.kind == "exponential" and self.smoothness != 0.5:
            raise ValueError("exponential kernel requires smoothness = 0.5")
        if self.kind == "exponential" and self.estimate_smoothness:
            raise ValueError("smoothness can only be estimated for kind = 'matern'")
        lo, hi = self.smoothness_bounds
        if not 0 < lo < hi:
            raise ValueError("smoothness_bounds must satisfy 0 < lo < hi")
        return self


class PenaltyConfig(StrictModel):
    mean_y: float = Field(1e-3, ge=0)
    mean_x: float = Field(1e-3, ge=0)
    theta_e: float = Field(1e-3, ge=0)
    theta_x: float = Field(1e-3, ge=0)
    lam: float = Field(1e-3, ge=0)

    def to_penalties(self, scale: float = 1.0) -> Penalties:
        return Penalties(
            mean_y=self.mean_y * scale,
            mean_x=self.mean_x * scale,
            theta_e=self.theta_e * scale,
            theta_x=self.theta_x * scale,
            lam=self.lam * scale,
        )


class InitConfig(StrictModel):
    kmeans_restarts: int = Field(10, ge=1)
    independent_em_iters: int = Field(5, ge=0)
    grid_points: int = Field(20, ge=2)
    xi: float = Field(0.5, ge=0)


class SolverConfig(StrictModel):
    vecchia_m: int = Field(10, ge=1)
    ordering: Literal["maxmin", "coordinate", "random"] = "maxmin"
    dense_threshold: int = Field(500, ge=0)
    cg_rel_tol: float = Field(1e-10, gt=0)
    n_probes: int = Field(32, ge=1)
    lanczos_tol: float = Field(1e-6, gt=0)

    def to_options(self) -> SolverOptions:
        return SolverOptions(
            vecchia_m=self.vecchia_m,
            ordering=self.ordering,
            dense_threshold=self.dense_threshold,
            cg_rel_tol=self.cg_rel_tol,
            n_probes=self.n_probes,
            lanczos_tol=self.lanczos_tol,
        )


class FitConfig(StrictModel):
    """Settings of one model fit."""

    n_clusters: int = Field(2, ge=1)
    n_predictor_pcs: int = Field(2, ge=0)
    n_residual_pcs: int = Field(2, ge=0)
    n_harmonics: int = Field(3, ge=0)
    coordinate_mode: Literal["sphere", "euclidean"] = "sphere"
    mc_samples: int = Field(20, ge=1)
    max_iters: int = Field(30, ge=0)
    gibbs_burn_in: int = Field(20, ge=0)
    gibbs_thin: int = Field(2, ge=1)
    tol: float = Field(1e-4, gt=0)
    patience: int = Field(3, ge=1)
    xi_max: float = Field(20.0, gt=0)
    seed: int = 0
    n_threads: int = Field(1, ge=1)
    basis: BasisConfig = BasisConfig()
    graph: GraphConfig = GraphConfig()
    kernel: KernelConfig = KernelConfig()
    penalties: PenaltyConfig = PenaltyConfig()
    init: InitConfig = InitConfig()
    solver: SolverConfig = SolverConfig()

    @model_validator(mode="after")
    def check_modes(self):
        if self.coordinate_mode == "euclidean" and self.kernel.estimate_deformation:
            raise ValueError("deformation is only available in sphere mode")
        return self


class GridConfig(StrictModel):
    """Prediction lattice and Monte Carlo settings of `predict`."""

    lon: list[float] = Field(min_length=1)
    lat: list[float] = Field(min_length=1)
    time: list[float] = Field(min_length=1)
    pressure: list[float] = Field(min_length=1)
    mc_samples: Optional[int] = Field(None, ge=1)
    band_level: float = Field(0.95, gt=0, lt=1)
    band_sims: int = Field(1000, ge=10)
    dominant_threshold: float = Field(0.99, gt=0, le=1)
    seed: int = 0


class SimConfig(StrictModel):
    """Synthetic clustering data on the unit square."""

    n_sites: int = Field(200, ge=2)
    n_obs: int = Field(20, ge=2)
    n_clusters: int = Field(2, ge=1)
    n_pcs: int = Field(3, ge=1)
    xi: float = Field(0.5, ge=0)
    n_neighbors: int = Field(5, ge=1)
    weighting: Literal["inverse_distance", "unit"] = "unit"
    noise_var: float = Field(1.0, ge=0)
    score_variances: list[float] = [1 / 3, 1 / 6, 1 / 12]
    ranges: list[list[float]] = [[0.10, 0.05, 0.07], [0.07, 0.10, 0.05]]
    burn_in_sweeps: int = Field(5000, ge=0)
    basis_dim: int = Field(11, ge=5)
    seed: int = 0

    @model_validator(mode="after")
    def check_shapes(self):
        if len(self.score_variances) != self.n_pcs:
            raise ValueError("score_variances needs one entry per PC")
        if len(self.ranges) != self.n_clusters or any(
            len(row) != self.n_pcs for row in self.ranges
        ):
            raise ValueError("ranges must be n_clusters x n_pcs")
        if self.n_clusters + 2 * self.n_pcs > self.basis_dim:
            raise ValueError("basis_dim too small for the requested PCs")
        if self.n_neighbors >= self.n_sites:
            raise ValueError("n_neighbors must be smaller than n_sites")
        return self


def simulation_fit_config(**overrides) -> FitConfig:
    """Fit settings matching the synthetic clustering data."""
    settings = dict(
        n_clusters=2,
        n_predictor_pcs=0,
        n_residual_pcs=3,
        n_harmonics=0,
        coordinate_mode="euclidean",
        mc_samples=20,
        max_iters=20,
        graph=GraphConfig(k=5, weighting="unit"),
        basis=BasisConfig(domain_lo=0.0, domain_hi=1.0, n_interior_knots=8),
    )
    settings.update(overrides)
    return FitConfig(**settings)


class StudyConfig(StrictModel):
    """Clustering-accuracy study over replicated synthetic datasets."""

    sim: SimConfig = SimConfig()
    fit: FitConfig = Field(default_factory=simulation_fit_config)
    n_obs_settings: list[int] = [20, 100]
    n_datasets: int = Field(20, ge=1)
    methods: list[Literal["importance", "gibbs"]] = ["importance", "gibbs"]
    seed: int = 0
    n_threads: int = Field(1, ge=1)


class SelectConfig(StrictModel):
    """AIC grid over principal component counts and penalty scales."""

    fit: FitConfig = FitConfig()
    data: Optional[str] = None
    predictor_pcs: list[int] = Field(default_factory=list)
    residual_pcs: list[int] = [2, 3, 4, 5]
    penalty_scales: list[float] = [1e-2, 1e-1, 1.0, 10.0, 100.0]
    aic_samples: int = Field(200, ge=1)
    n_threads: int = Field(1, ge=1)
    seed: int = 0


ConfigT = TypeVar("ConfigT", bound=BaseModel)

CONFIG_MODELS: dict[str, type[BaseModel]] = {
    "fit": FitConfig,
    "predict": GridConfig,
    "simulate": SimConfig,
    "study": StudyConfig,
    "select": SelectConfig,
}


def parse_config(data: dict, model: type[ConfigT], file_path: str = None) -> ConfigT:
    """
    Validate a configuration mapping.

    Raises:
        CokrigingError: With the failing field path on validation errors
    """
    try:
        return model.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or "<root>"
        raise CokrigingError.invalid_config(field, first["msg"], file_path) from e


def read_toml(path: str) -> dict:
    """
    Raises:
        CokrigingError: If the file is missing or not TOML
    """
    config_path = Path(path)
    try:
        with open(config_path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError as e:
        raise CokrigingError.invalid_config(
            "file", "configuration file not found", str(config_path)
        ) from e
    except tomllib.TOMLDecodeError as e:
        raise CokrigingError.invalid_config("file", str(e), str(config_path)) from e


def load_config(path: str, model: type[ConfigT]) -> ConfigT:
    """
    Read and validate a TOML configuration file.

    Raises:
        CokrigingError: If the file is missing, not TOML, or fails validation
    """
    config_path = Path(path)
    config = parse_config(read_toml(path), model, str(config_path))
    logger.info(f"Loaded {model.__name__} from {config_path}")
    return config


def detect_config_model(path: str) -> type[BaseModel]:
    """Pick the configuration model that accepts a file's top-level keys."""
    data = read_toml(path)
    for model in CONFIG_MODELS.values():
        try:
            model.model_validate(data)
            return model
        except ValidationError:
            continue
    raise CokrigingError.invalid_config(
        "<root>", "matches no known configuration schema", path
    )
