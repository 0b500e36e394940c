"""
Tests for configuration models and loading
"""

import shutil
import tempfile
import unittest
from pathlib import Path

from cokriging.config import (
    CONFIG_MODELS,
    FitConfig,
    GridConfig,
    PenaltyConfig,
    SelectConfig,
    SimConfig,
    SolverConfig,
    StudyConfig,
    detect_config_model,
    load_config,
    parse_config,
)
from cokriging.errors import CokrigingError

CONFIG_DIR = Path(__file__).resolve().parents[2] / "configs"


class TestParseConfig(unittest.TestCase):
    def test_defaults(self):
        config = parse_config({}, FitConfig)
        self.assertEqual(config.n_clusters, 2)
        self.assertEqual(config.graph.distance_weights, (1.0, 3.0, 12.0))
        self.assertEqual(config.solver.dense_threshold, 500)

    def test_field_path_in_error(self):
        with self.assertRaises(CokrigingError) as ctx:
            parse_config({"graph": {"k": 0}}, FitConfig, "fit.toml")
        self.assertEqual(str(ctx.exception), "Invalid configuration: graph.k")
        self.assertEqual(ctx.exception.exit_code, 2)
        self.assertEqual(ctx.exception.file_path, "fit.toml")

    def test_unknown_keys_are_rejected(self):
        with self.assertRaises(CokrigingError) as ctx:
            parse_config({"n_clustrs": 3}, FitConfig)
        self.assertIn("n_clustrs", str(ctx.exception))

    def test_cross_field_checks(self):
        invalid = [
            ({"kernel": {"kind": "exponential", "smoothness": 1.5}}, FitConfig),
            ({"kernel": {"kind": "exponential", "estimate_smoothness": True}}, FitConfig),
            ({"coordinate_mode": "euclidean", "kernel": {"estimate_deformation": True}}, FitConfig),
            ({"basis": {"domain_lo": 1.0, "domain_hi": 1.0}}, FitConfig),
            ({"n_pcs": 2}, SimConfig),
            ({"n_sites": 5, "n_neighbors": 5}, SimConfig),
            ({"lon": [], "lat": [0.0], "time": [0.0], "pressure": [0.0]}, GridConfig),
            ({"lon": [0.0], "lat": [0.0], "time": [0.0], "pressure": [0.0], "band_level": 1.0}, GridConfig),
        ]
        for data, model in invalid:
            with self.subTest(data=data):
                with self.assertRaises(CokrigingError):
                    parse_config(data, model)

    def test_matern_smoothness(self):
        config = parse_config(
            {"kernel": {"kind": "matern", "smoothness": 1.5, "estimate_smoothness": True}},
            FitConfig,
        )
        self.assertEqual(config.kernel.smoothness, 1.5)

    def test_study_defaults_match_simulation(self):
        config = StudyConfig()
        self.assertEqual(config.fit.coordinate_mode, "euclidean")
        self.assertEqual(config.fit.graph.k, config.sim.n_neighbors)

    def test_conversions(self):
        penalties = PenaltyConfig(lam=2.0).to_penalties(scale=10.0)
        self.assertEqual(penalties.lam, 20.0)
        self.assertAlmostEqual(penalties.mean_y, 1e-2)
        options = SolverConfig(vecchia_m=4, ordering="random").to_options()
        self.assertEqual((options.vecchia_m, options.ordering), (4, "random"))


class TestLoadConfig(unittest.TestCase):
    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_shipped_configs(self):
        expected = {
            "fit.toml": FitConfig,
            "sim_fit.toml": FitConfig,
            "grid.toml": GridConfig,
            "sim.toml": SimConfig,
            "study.toml": StudyConfig,
            "select.toml": SelectConfig,
        }
        for name, model in expected.items():
            with self.subTest(name=name):
                path = CONFIG_DIR / name
                self.assertIs(detect_config_model(str(path)), model)
                self.assertIsInstance(load_config(str(path), model), model)

    def test_missing_file(self):
        with self.assertRaises(CokrigingError) as ctx:
            load_config(str(self.temp_dir / "absent.toml"), FitConfig)
        self.assertEqual(ctx.exception.exit_code, 2)

    def test_invalid_toml(self):
        path = self.temp_dir / "broken.toml"
        path.write_text("n_clusters = [\n")
        with self.assertRaises(CokrigingError) as ctx:
            load_config(str(path), FitConfig)
        self.assertEqual(ctx.exception.exit_code, 2)

    def test_unmatched_schema(self):
        path = self.temp_dir / "other.toml"
        path.write_text("unknown_key = 1\n")
        with self.assertRaises(CokrigingError):
            detect_config_model(str(path))

    def test_every_command_has_a_model(self):
        self.assertEqual(
            sorted(CONFIG_MODELS), ["fit", "predict", "select", "simulate", "study"]
        )


if __name__ == "__main__":
    unittest.main()
