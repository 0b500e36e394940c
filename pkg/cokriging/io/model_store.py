"""
Versioned binary container for fitted models.

Layout:

    b"PCKM"                      magic
    uint32 little-endian         format version
    32 bytes                     SHA-256 of the container schema
    uint64 little-endian         header length
    header                       UTF-8 JSON: configuration, scalars, traces and
                                 the (offset, length) of every array
    payload                      concatenated .npy blobs, no pickling

Floats in the header are written by json, which round-trips them exactly, so
saving the same state twice gives identical bytes.
"""

import hashlib
import io
import json
import logging
import struct
from pathlib import Path

import numpy as np

from cokriging.config import FitConfig, parse_config
from cokriging.em.engine import FitState, training_graph
from cokriging.errors import CokrigingError
from cokriging.model.types import (
    ClusterParams,
    LatentSample,
    ModelParams,
    Penalties,
    Profile,
    profile_sites,
)
from cokriging.spatial.covariance import KernelParams
from cokriging.splines.basis import BasisSystem, block_gram, build_basis

logger = logging.getLogger(__name__)

MAGIC = b"PCKM"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sI32sQ")

CLUSTER_ARRAYS = ("upsilon_y", "upsilon_x", "theta_x", "theta_e", "lam")
PROFILE_ARRAYS = (
    "coords",
    "times",
    "y_counts",
    "y_pressures",
    "y_values",
    "x_counts",
    "x_pressures",
    "x_values",
)
SAMPLE_ARRAYS = ("sample_z", "sample_alpha", "sample_eta", "sample_log_weight",
                 "sample_weight", "sample_loglik")
HEADER_KEYS = (
    "config",
    "dims",
    "sigma2_y",
    "xi",
    "penalties",
    "kernels",
    "profile_ids",
    "iteration",
    "converged",
    "phase",
    "traces",
    "arrays",
)
SCHEMA = {
    "header": sorted(HEADER_KEYS),
    "cluster_arrays": list(CLUSTER_ARRAYS),
    "profile_arrays": list(PROFILE_ARRAYS),
    "sample_arrays": list(SAMPLE_ARRAYS),
    "state_arrays": ["sigma2_x", "labels", "init_labels"],
}
SCHEMA_HASH = hashlib.sha256(json.dumps(SCHEMA, sort_keys=True).encode()).digest()


def _encode_array(array: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    np.save(buffer, np.ascontiguousarray(array), allow_pickle=False)
    return buffer.getvalue()


def _decode_array(blob: bytes) -> np.ndarray:
    return np.load(io.BytesIO(blob), allow_pickle=False)


def _kernel_dict(params: KernelParams) -> dict:
    return {
        "variance": params.variance,
        "range_x": params.range_x,
        "range_t": params.range_t,
        "smoothness": params.smoothness,
        "deform_weights": list(params.deform_weights),
        "kind": params.kind,
    }


def _profile_arrays(profiles: list[Profile], K: int) -> dict[str, np.ndarray]:
    padded = [p.with_channels(K) for p in profiles]
    x_p = [p for prof in padded for p in prof.x_pressures]
    x_v = [v for prof in padded for v in prof.x_values]
    return {
        "coords": np.array([p.coords for p in padded], dtype=float).reshape(-1, 2),
        "times": np.array([p.time for p in padded], dtype=float),
        "y_counts": np.array([len(p.y_values) for p in padded], dtype=np.int64),
        "y_pressures": np.concatenate([p.y_pressures for p in padded] + [np.zeros(0)]),
        "y_values": np.concatenate([p.y_values for p in padded] + [np.zeros(0)]),
        "x_counts": np.array(
            [[len(v) for v in p.x_values] for p in padded], dtype=np.int64
        ).reshape(len(padded), K),
        "x_pressures": np.concatenate(x_p + [np.zeros(0)]),
        "x_values": np.concatenate(x_v + [np.zeros(0)]),
    }


def _profiles_from_arrays(arrays: dict[str, np.ndarray], ids: list[str]) -> list[Profile]:
    y_bounds = np.concatenate([[0], np.cumsum(arrays["y_counts"])])
    x_bounds = np.concatenate([[0], np.cumsum(arrays["x_counts"].ravel())])
    K = arrays["x_counts"].shape[1]
    profiles = []
    for i, profile_id in enumerate(ids):
        y = slice(y_bounds[i], y_bounds[i + 1])
        x = [slice(x_bounds[i * K + k], x_bounds[i * K + k + 1]) for k in range(K)]
        profiles.append(
            Profile(
                profile_id=profile_id,
                coords=tuple(arrays["coords"][i]),
                time=float(arrays["times"][i]),
                y_pressures=arrays["y_pressures"][y],
                y_values=arrays["y_values"][y],
                x_pressures=[arrays["x_pressures"][s] for s in x],
                x_values=[arrays["x_values"][s] for s in x],
            )
        )
    return profiles


def _sample_arrays(state: FitState) -> dict[str, np.ndarray]:
    n, omega = len(state.profiles), state.omega
    samples = state.samples
    T = len(samples)
    return {
        "sample_z": np.array([s.z for s in samples], dtype=np.int64).reshape(T, n),
        "sample_alpha": np.array([s.alpha for s in samples]).reshape(T, n, omega.Q1),
        "sample_eta": np.array([s.eta for s in samples]).reshape(T, n, omega.Q2),
        "sample_log_weight": np.array([s.log_weight for s in samples], dtype=float),
        "sample_weight": np.array([s.norm_weight for s in samples], dtype=float),
        "sample_loglik": np.array([s.loglik for s in samples], dtype=float),
    }


def save_model(output_path: Path, state: FitState, config: FitConfig) -> Path:
    """
    Write a fitted model and the configuration it was fitted with.

    Returns:
        Path of the written file
    """
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    omega = state.omega

    arrays: dict[str, np.ndarray] = {}
    for g, cluster in enumerate(omega.clusters):
        for name in CLUSTER_ARRAYS:
            arrays[f"cluster{g}.{name}"] = getattr(cluster, name)
    arrays.update(_profile_arrays(state.profiles, omega.K))
    arrays.update(_sample_arrays(state))
    arrays["sigma2_x"] = omega.sigma2_x
    arrays["labels"] = np.asarray(state.labels, dtype=np.int64)
    arrays["init_labels"] = np.asarray(state.init_labels, dtype=np.int64)

    blobs, table, offset = [], {}, 0
    for name in sorted(arrays):
        blob = _encode_array(arrays[name])
        table[name] = [offset, len(blob)]
        blobs.append(blob)
        offset += len(blob)

    header = {
        "config": config.model_dump(mode="json"),
        "dims": {"G": omega.G, "Q1": omega.Q1, "Q2": omega.Q2, "R": omega.R, "K": omega.K},
        "sigma2_y": float(omega.sigma2_y),
        "xi": float(omega.xi),
        "penalties": vars(omega.penalties),
        "kernels": [
            {
                "alpha": [_kernel_dict(k) for k in c.alpha_kernels],
                "eta": [_kernel_dict(k) for k in c.eta_kernels],
            }
            for c in omega.clusters
        ],
        "profile_ids": [p.profile_id for p in state.profiles],
        "iteration": state.iteration,
        "converged": state.converged,
        "phase": state.phase,
        "traces": {
            "loglik": [float(v) for v in state.loglik_trace],
            "loglik_se": [float(v) for v in state.loglik_se_trace],
            "ess": [float(v) for v in state.ess_trace],
            "xi": [float(v) for v in state.xi_trace],
        },
        "arrays": table,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(output_path, "wb") as f:
        f.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, SCHEMA_HASH, len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    logger.info(f"Saved model to {output_path} ({offset} payload bytes)")
    return output_path


def _read_container(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    if not path.exists():
        raise CokrigingError.file_not_found(str(path), "model file")
    data = path.read_bytes()
    if len(data) < _PREAMBLE.size:
        raise CokrigingError.corrupt_model(str(path), "file shorter than its preamble")
    magic, version, schema_hash, header_len = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise CokrigingError.corrupt_model(str(path), f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CokrigingError.model_version_mismatch(
            str(path), str(FORMAT_VERSION), str(version)
        )
    if schema_hash != SCHEMA_HASH:
        raise CokrigingError.model_version_mismatch(
            str(path), SCHEMA_HASH.hex()[:12], schema_hash.hex()[:12]
        )
    start = _PREAMBLE.size
    try:
        header = json.loads(data[start : start + header_len].decode("utf-8"))
        payload = data[start + header_len :]
        arrays = {
            name: _decode_array(payload[offset : offset + length])
            for name, (offset, length) in header["arrays"].items()
        }
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise CokrigingError.corrupt_model(str(path), str(e)) from e
    return header, arrays


def load_model(file_path: Path) -> tuple[FitState, FitConfig]:
    """
    Read a model written by save_model.

    Returns:
        (state, fit configuration); the basis, sites and neighbor graph are
        rebuilt from the configuration and the stored profiles

    Raises:
        CokrigingError: If the file is missing, corrupt, or of another
            format version or schema
    """
    path = Path(file_path)
    header, arrays = _read_container(path)
    try:
        config = parse_config(header["config"], FitConfig, str(path))
        dims = header["dims"]
        clusters = []
        for g, kernels in enumerate(header["kernels"]):
            clusters.append(
                ClusterParams(
                    **{name: arrays[f"cluster{g}.{name}"] for name in CLUSTER_ARRAYS},
                    alpha_kernels=[KernelParams(**k) for k in kernels["alpha"]],
                    eta_kernels=[KernelParams(**k) for k in kernels["eta"]],
                )
            )
        omega = ModelParams(
            **dims,
            clusters=clusters,
            sigma2_y=header["sigma2_y"],
            sigma2_x=arrays["sigma2_x"],
            xi=header["xi"],
            penalties=Penalties(**header["penalties"]),
        )
        profiles = _profiles_from_arrays(arrays, header["profile_ids"])
        samples = [
            LatentSample(
                z=arrays["sample_z"][t],
                alpha=arrays["sample_alpha"][t],
                eta=arrays["sample_eta"][t],
                log_weight=float(arrays["sample_log_weight"][t]),
                norm_weight=float(arrays["sample_weight"][t]),
                loglik=float(arrays["sample_loglik"][t]),
            )
            for t in range(len(arrays["sample_weight"]))
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise CokrigingError.corrupt_model(str(path), str(e)) from e

    basis = build_basis(
        config.basis.domain_lo, config.basis.domain_hi, config.basis.n_interior_knots
    )
    sites = profile_sites(profiles, config.coordinate_mode)
    traces = header["traces"]
    state = FitState(
        omega=omega,
        basis=basis,
        profiles=profiles,
        sites=sites,
        graph=training_graph(sites, config),
        labels=arrays["labels"].astype(int),
        init_labels=arrays["init_labels"].astype(int),
        iteration=header["iteration"],
        loglik_trace=traces["loglik"],
        loglik_se_trace=traces["loglik_se"],
        ess_trace=traces["ess"],
        xi_trace=traces["xi"],
        samples=samples,
        converged=header["converged"],
        phase=header["phase"],
    )
    logger.info(f"Loaded model with G={omega.G} and {len(profiles)} profiles from {path}")
    return state, config


def orthonormality_residuals(omega: ModelParams, basis: BasisSystem) -> list[dict]:
    """Max |Theta' J Theta - I| of the predictor and residual components per cluster."""
    residuals = []
    for cluster in omega.clusters:
        entry = {}
        for name, theta, gram in (
            ("theta_x", cluster.theta_x, block_gram(basis, omega.K)),
            ("theta_e", cluster.theta_e, basis.gram),
        ):
            if theta.shape[1] == 0:
                entry[name] = 0.0
                continue
            inner = theta.T @ gram @ theta
            entry[name] = float(np.max(np.abs(inner - np.eye(theta.shape[1]))))
        residuals.append(entry)
    return residuals


def write_diagnostics(output_path: Path, state: FitState) -> Path:
    """Write convergence diagnostics as JSON next to the model file."""
    output_path = Path(output_path)
    omega = state.omega
    sizes = np.bincount(state.assignments(), minlength=omega.G)
    diagnostics = {
        "iterations": state.iteration,
        "converged": state.converged,
        "loglik_trace": [float(v) for v in state.loglik_trace],
        "loglik_se_trace": [float(v) for v in state.loglik_se_trace],
        "ess_trace": [float(v) for v in state.ess_trace],
        "xi_trace": [float(v) for v in state.xi_trace],
        "sigma2_y": float(omega.sigma2_y),
        "sigma2_x": [float(v) for v in omega.sigma2_x],
        "cluster_sizes": [int(v) for v in sizes],
        "orthonormality_residuals": orthonormality_residuals(omega, state.basis),
    }
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, "w") as f:
        json.dump(diagnostics, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Wrote diagnostics to {output_path}")
    return output_path
