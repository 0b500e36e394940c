"""
Gridded prediction products.
"""

import csv
import itertools
import logging
from pathlib import Path

import numpy as np

from cokriging.config import FitConfig, GridConfig
from cokriging.em.engine import FitState
from cokriging.errors import CokrigingError
from cokriging.model.types import Profile
from cokriging.predict.cokriging import PredictionResult, predict

logger = logging.getLogger(__name__)

BASE_COLUMNS = [
    "lon",
    "lat",
    "time",
    "pressure",
    "pred_mean",
    "sd_total",
    "sd_scores",
    "sd_cluster",
]


def grid_header(n_clusters: int) -> list[str]:
    return BASE_COLUMNS + [f"p_cluster_{g + 1}" for g in range(n_clusters)]


def lattice_targets(grid: GridConfig) -> list[Profile]:
    """One response-less target per (lon, lat, time) cell, lon varying slowest."""
    return [
        Profile(profile_id=f"cell_{n}", coords=(lon, lat), time=time)
        for n, (lon, lat, time) in enumerate(
            itertools.product(grid.lon, grid.lat, grid.time)
        )
    ]


def write_grid_csv(
    output_path: Path, targets: list[Profile], results: list[PredictionResult], n_clusters: int
) -> Path:
    """
    Write one row per target and pressure.

    Floats are written with repr, the shortest string that reads back exactly.
    """
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(grid_header(n_clusters))
        for target, result in zip(targets, results):
            sd_scores = np.sqrt(np.maximum(result.var_scores, 0.0))
            sd_cluster = np.sqrt(np.maximum(result.var_cluster, 0.0))
            probs = [repr(float(p)) for p in result.cluster_probs]
            for m, pressure in enumerate(result.pressures):
                writer.writerow(
                    [
                        repr(float(target.coords[0])),
                        repr(float(target.coords[1])),
                        repr(float(target.time)),
                        repr(float(pressure)),
                        repr(float(result.mean[m])),
                        repr(float(result.sd_total[m])),
                        repr(float(sd_scores[m])),
                        repr(float(sd_cluster[m])),
                    ]
                    + probs
                )
    logger.info(f"Wrote {len(results)} gridded predictions to {output_path}")
    return output_path


def read_grid_csv(file_path: Path) -> dict[str, np.ndarray]:
    """
    Read a gridded product back into column arrays.

    Raises:
        CokrigingError: If the file is missing or a value is not numeric
    """
    file_path = Path(file_path)
    if not file_path.exists():
        raise CokrigingError.file_not_found(str(file_path), "prediction grid")
    with open(file_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        columns: dict[str, list[float]] = {name: [] for name in header}
        for row_number, row in enumerate(reader, start=2):
            for name, value in zip(header, row):
                try:
                    columns[name].append(float(value))
                except ValueError as e:
                    raise CokrigingError.invalid_row(
                        str(file_path), row_number, name, f"not a number: {value!r}"
                    ) from e
    return {name: np.array(values) for name, values in columns.items()}


def grid_predict(
    state: FitState, fit_config: FitConfig, grid: GridConfig, output_path: Path
) -> Path:
    """
    Predict over a lon x lat x time lattice and write the gridded CSV.

    Returns:
        Path of the written file
    """
    targets = lattice_targets(grid)
    logger.info(
        f"Predicting {len(targets)} cells at {len(grid.pressure)} pressures"
    )
    results = predict(
        targets,
        state,
        fit_config,
        np.array(grid.pressure),
        np.random.default_rng(grid.seed),
        mc_samples=grid.mc_samples,
        band_level=grid.band_level,
        band_sims=grid.band_sims,
        dominant_threshold=grid.dominant_threshold,
    )
    return write_grid_csv(output_path, targets, results, state.omega.G)
