#!/usr/bin/env python3
"""
Fit and prediction pipelines.

FitPipeline reads a profile CSV, fits the mixture model and writes the model
file with its diagnostics. PredictPipeline loads a model file and writes the
gridded predictions of a lattice configuration.

Expected input:
- A fit configuration (TOML) and a profile CSV
- A model file and a grid configuration (TOML)

Outputs:
- Model file (<out>) and diagnostics JSON (<out>.json)
- Prediction CSV with one row per lattice cell and pressure
"""

import logging
from pathlib import Path
from typing import Optional

from cokriging.config import FitConfig, GridConfig, load_config
from cokriging.em.engine import FitState, fit
from cokriging.errors import CokrigingError
from cokriging.io.model_store import load_model, save_model, write_diagnostics
from cokriging.io.profiles import read_profiles
from cokriging.predict.grid import grid_predict

logger = logging.getLogger(__name__)


def diagnostics_path(model_path: Path) -> Path:
    model_path = Path(model_path)
    return model_path.with_name(model_path.name + ".json")


class FitPipeline:
    """
    Fit workflow from profile CSV to model file.
    """

    def __init__(self, config_path: str = None, config: Optional[FitConfig] = None):
        """
        Initialize the pipeline with a configuration file or object.

        Args:
            config_path: Path to a fit configuration TOML file
            config: Already validated configuration (takes precedence)

        Raises:
            CokrigingError: If the configuration is missing or invalid
        """
        if config is None:
            if config_path is None:
                raise CokrigingError.invalid_config(
                    "config", "either a configuration file or object is required"
                )
            config = load_config(config_path, FitConfig)
        self.config = config
        self.state: Optional[FitState] = None

        logger.info(
            f"Fit pipeline initialized: G={config.n_clusters}, "
            f"Q1={config.n_predictor_pcs}, Q2={config.n_residual_pcs}"
        )

    def run(self, data_path: str, output_path: str) -> Path:
        """
        Complete pipeline from profile CSV to model file.

        Args:
            data_path: Profile CSV
            output_path: Model file to write; diagnostics go to <output_path>.json

        Returns:
            Path of the model file

        Raises:
            CokrigingError: If reading, fitting or writing fails
        """
        logger.info(f"Starting fit pipeline for {data_path}")
        data_path = Path(data_path)
        if not data_path.exists():
            raise CokrigingError.file_not_found(str(data_path), "profile CSV")
        model_path = Path(output_path)

        try:
            # Step 1: Read profiles
            logger.info("Reading profiles...")
            profiles = read_profiles(data_path)

            # Step 2: Fit
            logger.info("Fitting model...")
            self.state = fit(profiles, self.config)

            # Step 3: Write model and diagnostics
            logger.info("Writing model file...")
            save_model(model_path, self.state, self.config)
            write_diagnostics(diagnostics_path(model_path), self.state)

            logger.info(f"Fit pipeline completed successfully. Model in: {model_path}")
            return model_path

        except CokrigingError:
            raise
        except Exception as e:
            logger.error(f"Fit pipeline failed: {e}")
            raise CokrigingError.numeric_failure("fit pipeline", str(e)) from e


class PredictPipeline:
    """
    Prediction workflow from model file to gridded CSV.
    """

    def __init__(self, model_path: str):
        """
        Load the fitted model.

        Args:
            model_path: Model file written by FitPipeline

        Raises:
            CokrigingError: If the model file is missing, corrupt or of
                another format version
        """
        self.model_path = Path(model_path)
        self.state, self.config = load_model(self.model_path)
        logger.info(f"Predict pipeline initialized from {self.model_path}")

    def run(self, grid_path: str, output_path: str) -> Path:
        """
        Predict over the lattice of a grid configuration.

        Args:
            grid_path: Grid configuration TOML file
            output_path: Prediction CSV to write

        Returns:
            Path of the prediction CSV

        Raises:
            CokrigingError: If the grid is invalid or prediction fails
        """
        grid = load_config(grid_path, GridConfig)
        logger.info(f"Starting prediction over {grid_path}")
        try:
            path = grid_predict(self.state, self.config, grid, Path(output_path))
            logger.info(f"Predict pipeline completed successfully. Results in: {path}")
            return path
        except CokrigingError:
            raise
        except Exception as e:
            logger.error(f"Predict pipeline failed: {e}")
            raise CokrigingError.numeric_failure("predict pipeline", str(e)) from e
