"""
Tests for gridded prediction files
"""

import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

from cokriging.config import GridConfig
from cokriging.errors import CokrigingError
from cokriging.predict.cokriging import PredictionResult
from cokriging.predict.grid import (
    grid_header,
    lattice_targets,
    read_grid_csv,
    write_grid_csv,
)


class TestGridFiles(unittest.TestCase):
    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.grid = GridConfig(
            lon=[-40.0, -39.0], lat=[-55.0], time=[10.0, 20.0], pressure=[0.1, 0.5, 0.9]
        )

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_lattice_order(self):
        targets = lattice_targets(self.grid)
        cells = [(t.coords[0], t.coords[1], t.time) for t in targets]
        self.assertEqual(
            cells,
            [(-40.0, -55.0, 10.0), (-40.0, -55.0, 20.0), (-39.0, -55.0, 10.0), (-39.0, -55.0, 20.0)],
        )
        self.assertEqual(targets[3].profile_id, "cell_3")
        self.assertFalse(targets[0].has_response)

    def test_header(self):
        self.assertEqual(grid_header(2)[-2:], ["p_cluster_1", "p_cluster_2"])
        self.assertEqual(grid_header(1)[:4], ["lon", "lat", "time", "pressure"])

    def test_write_and_read(self):
        targets = lattice_targets(self.grid)
        pressures = np.array(self.grid.pressure)
        results = [
            PredictionResult(
                profile_id=t.profile_id,
                pressures=pressures,
                cluster_probs=np.array([0.25, 0.75]),
                mean_coef=np.zeros(4),
                mean=np.array([1.0, 2.0, 3.0]) + n,
                var_scores=np.array([0.09, 0.16, 0.25]),
                var_cluster=np.array([0.16, 0.09, 0.0]),
            )
            for n, t in enumerate(targets)
        ]
        path = write_grid_csv(Path(self.temp_dir) / "out" / "preds.csv", targets, results, 2)
        columns = read_grid_csv(path)

        self.assertEqual(list(columns), grid_header(2))
        self.assertEqual(len(columns["pred_mean"]), 12)
        np.testing.assert_array_equal(columns["pressure"][:3], pressures)
        np.testing.assert_array_equal(columns["pred_mean"][3:6], [2.0, 3.0, 4.0])
        np.testing.assert_allclose(columns["sd_total"][:3], [0.5, 0.5, 0.5])
        np.testing.assert_allclose(columns["sd_scores"][:3], [0.3, 0.4, 0.5])
        np.testing.assert_array_equal(columns["p_cluster_2"], 0.75)
        np.testing.assert_array_equal(columns["time"][:6], [10.0] * 3 + [20.0] * 3)

    def test_non_numeric_value(self):
        path = Path(self.temp_dir) / "bad.csv"
        path.write_text("lon,lat\n1.0,2.0\n1.0,north\n")
        with self.assertRaises(CokrigingError) as ctx:
            read_grid_csv(path)
        self.assertEqual(ctx.exception.error_code, "E003")
        self.assertIn("row 3", str(ctx.exception))

    def test_missing_file(self):
        with self.assertRaises(CokrigingError) as ctx:
            read_grid_csv(Path(self.temp_dir) / "absent.csv")
        self.assertEqual(ctx.exception.exit_code, 3)


if __name__ == "__main__":
    unittest.main()
