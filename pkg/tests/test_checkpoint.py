"""Checkpoint archive round-trips, determinism, and version gating."""

import json
import zipfile

import numpy as np
import pytest

from aquascan.checkpoint import (
    CheckpointError,
    CheckpointVersionError,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
)
from aquascan.nn import BatchNorm1d, Conv2d, Linear, Module, Tensor


class TinyNet(Module):
    def __init__(self, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.conv = Conv2d(1, 2, 3, padding=1, rng=rng)
        self.norm = BatchNorm1d(2)
        self.head = Linear(2, 1, rng=rng)


def test_round_trip_restores_every_tensor(tmp_path):
    rng = np.random.default_rng(42)
    src = TinyNet(rng)
    src.norm.set_buffer("running_mean", rng.standard_normal(2))
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, src, hyper={"width": 2})

    dst = TinyNet(np.random.default_rng(7))  # different init
    manifest = load_checkpoint(path, dst)
    assert manifest["hyper"] == {"width": 2}
    for (_, a), (_, b) in zip(src.named_parameters(), dst.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(dst.norm.running_mean, src.norm.running_mean)


def test_save_is_byte_identical(tmp_path):
    net = TinyNet()
    save_checkpoint(tmp_path / "a.ckpt", net, hyper={"k": 1})
    save_checkpoint(tmp_path / "b.ckpt", net, hyper={"k": 1})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_version_mismatch_is_distinct_error(tmp_path):
    net = TinyNet()
    path = tmp_path / "old.ckpt"
    save_checkpoint(path, net, version=99)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path, TinyNet())


def test_missing_version_field_rejected(tmp_path):
    path = tmp_path / "broken.ckpt"
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("manifest.json", json.dumps({"format": "aquascan-checkpoint"}))
    with pytest.raises(CheckpointError):
        read_manifest(path)


def test_shape_mismatch_rejected(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, TinyNet())

    class WrongNet(TinyNet):
        def __init__(self):
            super().__init__()
            self.head = Linear(3, 1)

    with pytest.raises(CheckpointError):
        load_checkpoint(path, WrongNet())


def test_not_a_zip_rejected(tmp_path):
    path = tmp_path / "garbage.ckpt"
    path.write_bytes(b"not an archive")
    with pytest.raises(CheckpointError):
        read_manifest(path)


def test_payloads_are_little_endian_float64(tmp_path):
    net = TinyNet()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, net)
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        assert manifest["dtype"] == "<f8"
        rec = manifest["parameters"][0]
        raw = zf.read("param/" + rec["path"])
        assert len(raw) == 8 * int(np.prod(rec["shape"]))
