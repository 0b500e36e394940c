"""
Tests for the model container
"""

import json
import shutil
import struct
import tempfile
import unittest
from pathlib import Path

import numpy as np

from cokriging.config import InitConfig, KernelConfig, SimConfig, simulation_fit_config
from cokriging.em.engine import fit
from cokriging.errors import CokrigingError
from cokriging.io.model_store import (
    MAGIC,
    load_model,
    orthonormality_residuals,
    save_model,
    write_diagnostics,
)
from cokriging.simulate.generator import generate


class TestModelStore(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        data = generate(
            SimConfig(n_sites=20, n_obs=8, burn_in_sweeps=10), np.random.default_rng(6)
        )
        cls.config = simulation_fit_config(
            mc_samples=3,
            max_iters=1,
            gibbs_burn_in=1,
            n_residual_pcs=2,
            kernel=KernelConfig(max_evals=10),
            init=InitConfig(independent_em_iters=1, kmeans_restarts=2),
        )
        cls.state = fit(data.profiles, cls.config)

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())
        self.path = save_model(self.temp_dir / "model.bin", self.state, self.config)

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_round_trip_is_byte_identical(self):
        state, config = load_model(self.path)
        again = save_model(self.temp_dir / "again.bin", state, config)
        self.assertEqual(self.path.read_bytes(), again.read_bytes())

    def test_loaded_state(self):
        state, config = load_model(self.path)
        self.assertEqual(config, self.config)
        self.assertEqual(state.omega.G, self.state.omega.G)
        self.assertEqual(state.omega.xi, self.state.omega.xi)
        np.testing.assert_array_equal(
            state.omega.clusters[1].theta_e, self.state.omega.clusters[1].theta_e
        )
        self.assertEqual(
            state.omega.clusters[0].eta_kernels, self.state.omega.clusters[0].eta_kernels
        )
        self.assertEqual(state.loglik_trace, self.state.loglik_trace)
        np.testing.assert_array_equal(state.assignments(), self.state.assignments())
        for a, b in zip(state.profiles, self.state.profiles):
            self.assertEqual(a.profile_id, b.profile_id)
            np.testing.assert_array_equal(a.y_values, b.y_values)
        self.assertEqual(state.graph.weights.nnz, self.state.graph.weights.nnz)

    def test_bad_magic(self):
        data = bytearray(self.path.read_bytes())
        data[:4] = b"NOPE"
        self.path.write_bytes(bytes(data))
        with self.assertRaises(CokrigingError) as ctx:
            load_model(self.path)
        self.assertEqual(ctx.exception.error_code, "E004")
        self.assertEqual(ctx.exception.exit_code, 3)

    def test_other_format_version(self):
        data = bytearray(self.path.read_bytes())
        data[4:8] = struct.pack("<I", 99)
        self.path.write_bytes(bytes(data))
        with self.assertRaises(CokrigingError) as ctx:
            load_model(self.path)
        self.assertIn("version", str(ctx.exception))
        self.assertIn("99", ctx.exception.details)

    def test_truncated_file(self):
        self.path.write_bytes(MAGIC)
        with self.assertRaises(CokrigingError) as ctx:
            load_model(self.path)
        self.assertEqual(ctx.exception.error_code, "E004")

    def test_missing_file(self):
        with self.assertRaises(CokrigingError) as ctx:
            load_model(self.temp_dir / "absent.bin")
        self.assertEqual(ctx.exception.error_code, "E002")

    def test_diagnostics(self):
        path = write_diagnostics(self.temp_dir / "model.bin.json", self.state)
        diagnostics = json.loads(path.read_text())
        self.assertEqual(diagnostics["iterations"], 1)
        self.assertEqual(len(diagnostics["loglik_trace"]), 1)
        residuals = orthonormality_residuals(self.state.omega, self.state.basis)
        self.assertEqual(len(residuals), 2)
        self.assertLess(max(r["theta_e"] for r in residuals), 1e-8)


if __name__ == "__main__":
    unittest.main()
