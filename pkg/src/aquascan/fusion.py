"""Gated cross-attention fusing the visual feature with the sensor feature.

The two pooled branch features are projected into a shared embedding space
(q from the visual side, k and v from the temporal side); scaled-dot-product
attention produces a sensor-informed adjustment ``a``; a sigmoid gate
computed from both raw features mixes ``a`` with the (projected) visual
feature.  A small MLP head maps the fused vector to an anomaly-risk score.

Two attention modes exist:

* ``literal`` — one token per side, exactly as the pooled-vector equations
  read.  The softmax then normalizes a single logit, so the attention output
  equals ``v`` bit-for-bit and the query/key projections carry no gradient
  signal.  Kept to make that degeneracy demonstrable.
* ``multi_token`` (default) — queries are per-spatial-position visual tokens,
  keys/values are per-time-step temporal tokens; the attended queries are
  averaged back into a single vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    Linear,
    Module,
    ShapeError,
    Tensor,
    concat,
    matmul,
    relu,
    reshape,
    sigmoid,
    softmax,
    tmean,
    transpose,
)

MODES = ("literal", "multi_token")


class BudgetError(ValueError):
    """Fusion block exceeds its configured parameter ceiling."""


@dataclass
class FusionConfig:
    visual_dim: int = 256
    temporal_dim: int = 256
    embed_dim: int = 128  # d_k, the shared embedding width
    head_hidden: int = 64
    mode: str = "multi_token"
    param_budget: int = 400_000

    def __post_init__(self):
        for name in ("visual_dim", "temporal_dim", "embed_dim", "head_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def to_dict(self) -> dict:
        return {
            "visual_dim": self.visual_dim,
            "temporal_dim": self.temporal_dim,
            "embed_dim": self.embed_dim,
            "head_hidden": self.head_hidden,
            "mode": self.mode,
            "param_budget": self.param_budget,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        return cls(**d)


@dataclass
class FusionState:
    """Intermediate quantities of one fusion pass (all batch-major Tensors)."""

    q: Tensor
    k: Tensor
    v: Tensor
    attention: Tensor  # a
    gate: Tensor  # g
    f_fused: Tensor
    risk_logit: Tensor
    risk: Tensor


class FusionBlock(Module):
    def __init__(self, cfg: FusionConfig | None = None, rng=None):
        super().__init__()
        cfg = cfg or FusionConfig()
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        d_k = cfg.embed_dim
        self.wq = Linear(cfg.visual_dim, d_k, bias=False, rng=rng)
        self.wk = Linear(cfg.temporal_dim, d_k, bias=False, rng=rng)
        self.wv = Linear(cfg.temporal_dim, d_k, bias=False, rng=rng)
        self.wg = Linear(cfg.visual_dim + cfg.temporal_dim, d_k, bias=False, rng=rng)
        # the gated mix pairs a (width d_k) with the visual feature; a learned
        # projection reconciles the widths when they differ
        self.vproj = (
            Linear(cfg.visual_dim, d_k, bias=False, rng=rng)
            if cfg.visual_dim != d_k
            else None
        )
        self.head1 = Linear(d_k, cfg.head_hidden, rng=rng)
        self.head2 = Linear(cfg.head_hidden, 1, rng=rng)

    # -- spec'd operations, usable standalone ---------------------------

    def project_qkv(self, f_v: Tensor, f_t: Tensor):
        """Pooled vectors (B, d_v), (B, d_t) -> (q, k, v) each (B, 1, d_k)."""
        if f_v.shape[-1] != self.cfg.visual_dim:
            raise ShapeError(
                f"visual feature width {f_v.shape[-1]} != {self.cfg.visual_dim}"
            )
        if f_t.shape[-1] != self.cfg.temporal_dim:
            raise ShapeError(
                f"temporal feature width {f_t.shape[-1]} != {self.cfg.temporal_dim}"
            )
        b = f_v.shape[0]
        q = reshape(self.wq(f_v), (b, 1, self.cfg.embed_dim))
        k = reshape(self.wk(f_t), (b, 1, self.cfg.embed_dim))
        v = reshape(self.wv(f_t), (b, 1, self.cfg.embed_dim))
        return q, k, v

    def cross_attend(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        """Scaled-dot-product attention, queries pooled afterwards.

        q: (B, N, d_k); k, v: (B, T, d_k) -> (B, d_k).  With a single key
        token the softmax normalizes one logit to exactly 1.0, so the result
        is exactly the value token.
        """
        if q.shape[1] == 0 or k.shape[1] == 0:
            raise ShapeError("attention requires at least one query and one key token")
        scale = 1.0 / np.sqrt(self.cfg.embed_dim)
        scores = matmul(q, transpose(k, (0, 2, 1))) * scale  # (B, N, T)
        weights = softmax(scores, axis=2)
        attended = matmul(weights, v)  # (B, N, d_k)
        return tmean(attended, axis=1)

    def gate_fuse(self, a: Tensor, f_v: Tensor, f_t: Tensor,
                  gate_mode: str = "learned"):
        """Sigmoid-gated mix of the attention vector and the visual operand.

        gate_mode 'learned' uses g = sigmoid(Wg [f_v; f_t]); 'on' pins the
        gate fully open (f_fused = a), which is the no-gate ablation.
        """
        operand = self.vproj(f_v) if self.vproj is not None else f_v
        if gate_mode == "on":
            g = Tensor(np.ones((a.shape[0], self.cfg.embed_dim)))
        elif gate_mode == "learned":
            g = sigmoid(self.wg(concat([f_v, f_t], axis=1)))
        else:
            raise ValueError(f"unknown gate_mode {gate_mode!r}")
        f_fused = g * a + (1.0 - g) * operand
        return g, f_fused

    def predict_risk(self, f_fused: Tensor):
        """(B, d_k) -> (risk_logit (B,1), risk (B,1) in (0,1))."""
        if not np.isfinite(f_fused.data).all():
            raise ValueError("non-finite fused feature")
        logit = self.head2(relu(self.head1(f_fused)))
        return logit, sigmoid(logit)

    # -- assembled pass --------------------------------------------------

    def forward(self, f_v: Tensor, f_t: Tensor, visual_tokens: Tensor | None = None,
                temporal_tokens: Tensor | None = None,
                gate_mode: str = "learned") -> FusionState:
        """Full fusion pass.

        ``visual_tokens`` (B, N, d_v) and ``temporal_tokens`` (B, T, d_t) are
        required in multi_token mode and ignored in literal mode.
        """
        if self.cfg.mode == "literal":
            q, k, v = self.project_qkv(f_v, f_t)
        else:
            if visual_tokens is None or temporal_tokens is None:
                raise ShapeError("multi_token mode needs visual and temporal tokens")
            if visual_tokens.shape[1] == 0 or temporal_tokens.shape[1] == 0:
                raise ShapeError("empty token set")
            q = self.wq(visual_tokens)
            k = self.wk(temporal_tokens)
            v = self.wv(temporal_tokens)
        a = self.cross_attend(q, k, v)
        g, f_fused = self.gate_fuse(a, f_v, f_t, gate_mode=gate_mode)
        logit, risk = self.predict_risk(f_fused)
        return FusionState(q, k, v, a, g, f_fused, logit, risk)

    def assert_within_budget(self):
        n = self.param_count()
        if n > self.cfg.param_budget:
            raise BudgetError(
                f"fusion block has {n} parameters, budget {self.cfg.param_budget}"
            )
        return n


class LateFusionHead(Module):
    """Ablation baseline: concatenate f_v and f_t straight into the MLP."""

    def __init__(self, visual_dim: int, temporal_dim: int, hidden: int = 64, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.head1 = Linear(visual_dim + temporal_dim, hidden, rng=rng)
        self.head2 = Linear(hidden, 1, rng=rng)

    def forward(self, f_v: Tensor, f_t: Tensor):
        joint = concat([f_v, f_t], axis=1)
        logit = self.head2(relu(self.head1(joint)))
        return logit, sigmoid(logit)
