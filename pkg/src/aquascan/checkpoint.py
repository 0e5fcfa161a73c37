"""Model checkpoint archive.

A checkpoint is a single zip file holding ``manifest.json`` plus one raw
little-endian payload per parameter/buffer, each named by the owning
module's stable dotted path.  Writes are deterministic: entries are sorted,
timestamps fixed, compression disabled — saving the same model twice yields
byte-identical files.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from . import CHECKPOINT_VERSION

# zip epoch; fixed so archives are byte-identical across runs
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class CheckpointError(RuntimeError):
    """Malformed or unreadable checkpoint archive."""


class CheckpointVersionError(CheckpointError):
    """Archive written by an incompatible format version."""


def _entry(name: str, payload: bytes) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(path, module, hyper: dict | None = None, extra: dict | None = None,
                    version: int = CHECKPOINT_VERSION) -> None:
    """Serialize ``module``'s parameters and buffers to a zip archive."""
    params = list(module.named_parameters())
    buffers = list(module.named_buffers())
    manifest = {
        "version": version,
        "format": "aquascan-checkpoint",
        "dtype": "<f8",
        "hyper": hyper or {},
        "parameters": [
            {"path": name, "shape": list(t.data.shape)} for name, t in params
        ],
        "buffers": [
            {"path": name, "shape": list(np.asarray(b).shape)} for name, b in buffers
        ],
    }
    if extra:
        manifest["extra"] = extra

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        blob = json.dumps(manifest, indent=1, sort_keys=True).encode()
        zf.writestr(_entry("manifest.json", blob), blob)
        for name, t in sorted(params):
            data = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            zf.writestr(_entry(f"param/{name}", data), data)
        for name, b in sorted(buffers):
            data = np.ascontiguousarray(b, dtype="<f8").tobytes()
            zf.writestr(_entry(f"buffer/{name}", data), data)


def read_manifest(path) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, FileNotFoundError) as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if "version" not in manifest:
        raise CheckpointError(f"checkpoint {path} has no version field")
    return manifest


def load_checkpoint(path, module, expect_version: int = CHECKPOINT_VERSION) -> dict:
    """Restore parameters/buffers into ``module``; returns the manifest.

    The module must already be constructed with matching architecture; the
    manifest's shapes are validated against the live tensors.
    """
    manifest = read_manifest(path)
    if manifest["version"] != expect_version:
        raise CheckpointVersionError(
            f"checkpoint {path} is format version {manifest['version']}, "
            f"expected {expect_version}"
        )
    params = dict(module.named_parameters())
    buffers = dict(module.named_buffers())
    with zipfile.ZipFile(path) as zf:
        stored_params = {rec["path"]: tuple(rec["shape"]) for rec in manifest["parameters"]}
        if set(stored_params) != set(params):
            missing = set(stored_params) ^ set(params)
            raise CheckpointError(f"parameter set mismatch: {sorted(missing)[:6]}")
        for name, t in params.items():
            shape = stored_params[name]
            if tuple(t.data.shape) != shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: archive {shape}, model {tuple(t.data.shape)}"
                )
            raw = np.frombuffer(zf.read(f"param/{name}"), dtype="<f8")
            t.data = raw.reshape(shape).astype(np.float64).copy()
        stored_buffers = {rec["path"]: tuple(rec["shape"]) for rec in manifest.get("buffers", [])}
        for name, shape in stored_buffers.items():
            if name not in buffers:
                raise CheckpointError(f"unknown buffer in archive: {name}")
            raw = np.frombuffer(zf.read(f"buffer/{name}"), dtype="<f8")
            module.set_buffer_by_path(name, raw.reshape(shape).astype(np.float64).copy())
    return manifest
