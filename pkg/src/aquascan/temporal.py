"""Sensor branch: residual 1D CNN over a six-channel water-quality window.

Input is a fixed-order window (pH, turbidity, TDS, temperature, dissolved
oxygen, ORP) sampled at 1 Hz.  A kernel-7 stem is followed by two residual
stages; global average pooling over time yields the temporal feature f_t,
whose dimension equals the final stage width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    Activation,
    BatchNorm1d,
    Conv1d,
    Module,
    ModuleList,
    ShapeError,
    Tensor,
    global_avg_pool1d,
    relu,
)

SENSOR_CHANNELS = ("ph", "turbidity", "tds", "temperature", "do", "orp")
N_SENSOR_CHANNELS = len(SENSOR_CHANNELS)

# physical plausibility bounds checked on valid samples (lo, hi)
CHANNEL_BOUNDS = {
    "ph": (0.0, 14.0),
    "turbidity": (0.0, None),
    "tds": (0.0, None),
    "temperature": (None, None),
    "do": (0.0, None),
    "orp": (None, None),
}

SENSOR_CSV_HEADER = "timestamp,ph,turbidity,tds,temperature,do,orp,valid_mask"


class ImputationError(ValueError):
    """A channel has no valid samples to interpolate from."""


@dataclass
class SensorWindow:
    """A (6, T) block of readings with a per-sample validity mask."""

    values: np.ndarray  # (6, T)
    valid: np.ndarray  # (6, T) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.ndim != 2 or self.values.shape[0] != N_SENSOR_CHANNELS:
            raise ShapeError(f"window must be (6, T), got {self.values.shape}")
        if self.valid.shape != self.values.shape:
            raise ShapeError(
                f"mask shape {self.valid.shape} != values shape {self.values.shape}"
            )
        for i, name in enumerate(SENSOR_CHANNELS):
            lo, hi = CHANNEL_BOUNDS[name]
            vals = self.values[i][self.valid[i]]
            if lo is not None and vals.size and vals.min() < lo:
                raise ValueError(f"{name} reading {vals.min()} below {lo}")
            if hi is not None and vals.size and vals.max() > hi:
                raise ValueError(f"{name} reading {vals.max()} above {hi}")

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass
class NormStats:
    """Per-channel mean/std, computed from the training split only."""

    mean: np.ndarray  # (6,)
    std: np.ndarray  # (6,)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(N_SENSOR_CHANNELS)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(N_SENSOR_CHANNELS)
        if np.any(self.std <= 0):
            raise ValueError("std must be positive for every channel")

    @classmethod
    def from_windows(cls, windows) -> "NormStats":
        sums = np.zeros(N_SENSOR_CHANNELS)
        sq = np.zeros(N_SENSOR_CHANNELS)
        counts = np.zeros(N_SENSOR_CHANNELS)
        for w in windows:
            for c in range(N_SENSOR_CHANNELS):
                v = w.values[c][w.valid[c]]
                sums[c] += v.sum()
                sq[c] += (v * v).sum()
                counts[c] += v.size
        if np.any(counts == 0):
            empty = [SENSOR_CHANNELS[i] for i in np.where(counts == 0)[0]]
            raise ImputationError(f"no valid training samples for channels {empty}")
        mean = sums / counts
        var = np.maximum(sq / counts - mean**2, 0.0)
        return cls(mean, np.sqrt(var) + 1e-6)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]))


def impute_channel(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Linear interpolation across invalid gaps; edges hold the nearest value."""
    if not valid.any():
        raise ImputationError("channel has no valid samples")
    if valid.all():
        return values.astype(np.float64, copy=True)
    t = np.arange(values.size)
    return np.interp(t, t[valid], values[valid])


def normalize_window(window: SensorWindow, stats: NormStats):
    """Standardize to z-scores after imputation.

    Returns (normalized (6,T) array, imputed mask (6,T) marking filled slots).
    """
    out = np.empty_like(window.values)
    for c in range(N_SENSOR_CHANNELS):
        try:
            out[c] = impute_channel(window.values[c], window.valid[c])
        except ImputationError as e:
            raise ImputationError(
                f"channel {SENSOR_CHANNELS[c]!r}: {e}"
            ) from None
    out = (out - stats.mean[:, None]) / stats.std[:, None]
    return out, ~window.valid


@dataclass
class TemporalConfig:
    stem_width: int = 64
    stage_widths: tuple = (128, 256)
    blocks_per_stage: tuple = (2, 2)
    stem_kernel: int = 7
    block_kernel: int = 3

    def __post_init__(self):
        widths = (self.stem_width,) + tuple(self.stage_widths)
        if any(w <= 0 for w in widths):
            raise ValueError(f"widths must be positive, got {widths}")
        if list(widths) != sorted(widths):
            raise ValueError(f"widths must be non-decreasing, got {widths}")
        if len(self.stage_widths) != len(self.blocks_per_stage):
            raise ValueError("stage_widths and blocks_per_stage lengths differ")

    @property
    def feature_dim(self) -> int:
        return self.stage_widths[-1]

    def to_dict(self) -> dict:
        return {
            "stem_width": self.stem_width,
            "stage_widths": list(self.stage_widths),
            "blocks_per_stage": list(self.blocks_per_stage),
            "stem_kernel": self.stem_kernel,
            "block_kernel": self.block_kernel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TemporalConfig":
        d = dict(d)
        for key in ("stage_widths", "blocks_per_stage"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def paper_preset(cls) -> "TemporalConfig":
        return cls()

    @classmethod
    def tiny_preset(cls) -> "TemporalConfig":
        return cls(stem_width=8, stage_widths=(16, 32))


class ResBlock1d(Module):
    """conv-BN-ReLU, conv-BN, plus a skip path; ReLU after the sum.

    A width or stride change puts a learned 1x1 projection (with BN) on the
    skip path; otherwise the skip is the identity.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 rng=None):
        super().__init__()
        pad = kernel // 2
        self.conv1 = Conv1d(in_ch, out_ch, kernel, stride=stride, padding=pad,
                            bias=False, rng=rng)
        self.bn1 = BatchNorm1d(out_ch)
        self.conv2 = Conv1d(out_ch, out_ch, kernel, padding=pad, bias=False, rng=rng)
        self.bn2 = BatchNorm1d(out_ch)
        if in_ch != out_ch or stride != 1:
            self.proj = Conv1d(in_ch, out_ch, 1, stride=stride, bias=False, rng=rng)
            self.bn_proj = BatchNorm1d(out_ch)
        else:
            self.proj = None

    def forward(self, x: Tensor) -> Tensor:
        y = relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        skip = x if self.proj is None else self.bn_proj(self.proj(x))
        return relu(y + skip)


class TemporalBranch(Module):
    """Stem + residual stages + global average pooling -> f_t."""

    def __init__(self, cfg: TemporalConfig | None = None, rng=None):
        super().__init__()
        cfg = cfg or TemporalConfig()
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.stem = Conv1d(N_SENSOR_CHANNELS, cfg.stem_width, cfg.stem_kernel,
                           padding=cfg.stem_kernel // 2, bias=False, rng=rng)
        self.stem_bn = BatchNorm1d(cfg.stem_width)
        self.stem_act = Activation("relu")
        blocks = []
        in_ch = cfg.stem_width
        for width, n_blocks in zip(cfg.stage_widths, cfg.blocks_per_stage):
            for b in range(n_blocks):
                stride = 2 if b == 0 else 1  # downsample entering each stage
                blocks.append(ResBlock1d(in_ch, width, cfg.block_kernel,
                                         stride=stride, rng=rng))
                in_ch = width
        self.blocks = ModuleList(blocks)

    @property
    def feature_dim(self) -> int:
        return self.cfg.feature_dim

    def forward_tokens(self, window: Tensor) -> Tensor:
        """(B, 6, T) -> per-time-step features (B, final width, T') before pooling."""
        if window.ndim != 3 or window.shape[1] != N_SENSOR_CHANNELS:
            raise ShapeError(f"expected (B, 6, T) window, got {window.shape}")
        if window.shape[2] < self.cfg.stem_kernel:
            raise ShapeError(
                f"window length {window.shape[2]} shorter than stem kernel "
                f"{self.cfg.stem_kernel}"
            )
        x = self.stem_act(self.stem_bn(self.stem(window)))
        for block in self.blocks:
            x = block(x)
        return x

    def forward(self, window: Tensor) -> Tensor:
        """(B, 6, T) -> f_t (B, final width)."""
        return global_avg_pool1d(self.forward_tokens(window))
