"""
Command-line interface.

Commands:
    fit              profile CSV -> model file + diagnostics JSON
    predict          model file + grid configuration -> prediction CSV
    simulate         synthetic profiles and true labels
    study            clustering-accuracy study CSV
    select           AIC table CSV
    validate-config  check configuration files

Exit status: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel

from cokriging.config import (
    CONFIG_MODELS,
    SelectConfig,
    SimConfig,
    StudyConfig,
    detect_config_model,
    load_config,
)
from cokriging.errors import CokrigingError
from cokriging.io.profiles import read_profiles, write_labels, write_profiles
from cokriging.pipeline import FitPipeline, PredictPipeline
from cokriging.selection.aic import select, write_selection_csv
from cokriging.simulate.generator import generate
from cokriging.simulate.study import run_study, write_study_csv

logger = logging.getLogger(__name__)

NUMERIC_EXIT_CODE = 4


def default_settings(model: type[BaseModel]) -> dict:
    """Defaults of a configuration model; required fields show as null."""
    values = {}
    for name, info in model.model_fields.items():
        if info.is_required():
            values[name] = None
            continue
        default = info.get_default(call_default_factory=True)
        values[name] = (
            default.model_dump(mode="json") if isinstance(default, BaseModel) else default
        )
    return values


def _fit(args) -> str:
    return str(FitPipeline(args.config).run(args.data, args.out))


def _predict(args) -> str:
    return str(PredictPipeline(args.model).run(args.grid, args.out))


def _simulate(args) -> str:
    config = load_config(args.config, SimConfig)
    data = generate(config, np.random.default_rng(config.seed))
    out_dir = Path(args.out)
    write_profiles(out_dir / "profiles.csv", data.profiles)
    write_labels(
        out_dir / "labels.csv", [p.profile_id for p in data.profiles], data.labels
    )
    return str(out_dir)


def _study(args) -> str:
    config = load_config(args.config, StudyConfig)
    return str(write_study_csv(Path(args.out), run_study(config)))


def _select(args) -> str:
    config = load_config(args.config, SelectConfig)
    data = args.data or config.data
    if data is None:
        raise CokrigingError.invalid_config(
            "data", "give --data or set data in the configuration", args.config
        )
    rows = select(read_profiles(Path(data)), config)
    return str(write_selection_csv(Path(args.out), rows))


def _validate(args) -> str:
    for path in args.configs:
        model = detect_config_model(path)
        load_config(path, model)
        print(f"✅ {path}: valid {model.__name__}")
    return f"{len(args.configs)} configuration file(s)"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cokriging",
        description="Spatial mixture cokriging of vertical profiles",
    )
    parser.add_argument(
        "--print-defaults",
        choices=sorted(CONFIG_MODELS),
        metavar="COMMAND",
        help="Print the default configuration of a command and exit",
    )
    parser.add_argument(
        "--verbose", "-v", action="store_true", help="Enable verbose logging"
    )
    commands = parser.add_subparsers(dest="command")

    fit = commands.add_parser("fit", help="Fit the model to a profile CSV")
    fit.add_argument("--config", required=True, help="Fit configuration (TOML)")
    fit.add_argument("--data", required=True, help="Profile CSV")
    fit.add_argument("--out", required=True, help="Model file to write")
    fit.set_defaults(handler=_fit)

    predict = commands.add_parser("predict", help="Predict over a lattice")
    predict.add_argument("--model", required=True, help="Model file")
    predict.add_argument("--grid", required=True, help="Grid configuration (TOML)")
    predict.add_argument("--out", required=True, help="Prediction CSV to write")
    predict.set_defaults(handler=_predict)

    simulate = commands.add_parser("simulate", help="Generate synthetic profiles")
    simulate.add_argument("--config", required=True, help="Simulation configuration")
    simulate.add_argument("--out", required=True, help="Output directory")
    simulate.set_defaults(handler=_simulate)

    study = commands.add_parser("study", help="Run the clustering-accuracy study")
    study.add_argument("--config", required=True, help="Study configuration")
    study.add_argument("--out", required=True, help="Study CSV to write")
    study.set_defaults(handler=_study)

    sel = commands.add_parser("select", help="AIC selection of component counts")
    sel.add_argument("--config", required=True, help="Selection configuration")
    sel.add_argument("--data", help="Profile CSV (overrides the configuration)")
    sel.add_argument("--out", default="selection.csv", help="AIC table to write")
    sel.set_defaults(handler=_select)

    validate = commands.add_parser("validate-config", help="Check configuration files")
    validate.add_argument("configs", nargs="+", help="Configuration files")
    validate.set_defaults(handler=_validate)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """Run one command and return its exit status."""
    parser = build_parser()
    args = parser.parse_args(argv)

    log_level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(
        level=log_level, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )

    if args.print_defaults:
        model = CONFIG_MODELS[args.print_defaults]
        print(json.dumps(default_settings(model), indent=2, default=str))
        return 0
    if args.command is None:
        parser.print_help()
        return 2

    try:
        result = args.handler(args)
        print(f"✅ {args.command} completed. Results saved in: {result}")
        return 0
    except CokrigingError as e:
        logger.debug(e.args[0])
        print(f"❌ Error running {args.command}: {e}")
        if e.details:
            print(f"   {e.details}")
        return e.exit_code
    except ValueError as e:
        print(f"❌ Numerical error in {args.command}: {e}")
        return NUMERIC_EXIT_CODE


if __name__ == "__main__":
    sys.exit(main())
