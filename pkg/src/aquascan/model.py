"""The assembled cross-modal monitor: vision + temporal + fusion variants.

A single model class covers every ablation configuration as data, not as a
code fork:

* ``gated``          — full gated cross-attention fusion (the default)
* ``no_gate``        — cross-attention with the gate pinned open (f_fused = a)
* ``late_fusion``    — concatenate pooled features straight into the MLP
* ``vision_only``    — detection branch plus a risk head on f_v alone
* ``temporal_only``  — sensor branch plus a risk head on f_t alone
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fusion import FusionBlock, FusionConfig, FusionState, LateFusionHead
from .nn import Linear, Module, ShapeError, Tensor, relu, reshape, sigmoid, transpose
from .temporal import TemporalBranch, TemporalConfig
from .vision import BackboneConfig, VisionBranch, detections_from_raw, generate_anchors

VARIANTS = ("gated", "no_gate", "late_fusion", "vision_only", "temporal_only")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    variant: str = "gated"
    attention_mode: str = "multi_token"
    embed_dim: int = 128
    head_hidden: int = 64
    fusion_param_budget: int = 400_000
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def has_vision(self) -> bool:
        return self.variant != "temporal_only"

    @property
    def has_temporal(self) -> bool:
        return self.variant != "vision_only"

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone.to_dict(),
            "temporal": self.temporal.to_dict(),
            "variant": self.variant,
            "attention_mode": self.attention_mode,
            "embed_dim": self.embed_dim,
            "head_hidden": self.head_hidden,
            "fusion_param_budget": self.fusion_param_budget,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig.from_dict(d["backbone"])
        d["temporal"] = TemporalConfig.from_dict(d["temporal"])
        return cls(**d)

    @classmethod
    def tiny_preset(cls, variant: str = "gated", seed: int = 0) -> "ModelConfig":
        return cls(
            backbone=BackboneConfig.tiny_preset(),
            temporal=TemporalConfig.tiny_preset(),
            variant=variant,
            embed_dim=16,
            head_hidden=16,
            seed=seed,
        )

    @classmethod
    def paper_preset(cls, variant: str = "gated", seed: int = 0) -> "ModelConfig":
        return cls(variant=variant, seed=seed)


@dataclass
class ModelOutput:
    """One forward pass; detection tensors are None for temporal_only."""

    box_regs: Tensor | None
    cls_logits: Tensor | None
    obj_logits: Tensor | None
    f_v: Tensor | None
    f_t: Tensor | None
    risk_logit: Tensor
    risk: Tensor
    fusion: FusionState | None = None


class UnimodalRiskHead(Module):
    """MLP + sigmoid risk head over a single pooled feature."""

    def __init__(self, in_dim: int, hidden: int, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.fc1 = Linear(in_dim, hidden, rng=rng)
        self.fc2 = Linear(hidden, 1, rng=rng)

    def forward(self, f: Tensor):
        logit = self.fc2(relu(self.fc1(f)))
        return logit, sigmoid(logit)


class CrossModalModel(Module):
    def __init__(self, cfg: ModelConfig | None = None, rng=None):
        super().__init__()
        cfg = cfg or ModelConfig()
        rng = rng or np.random.default_rng(cfg.seed)
        self.cfg = cfg

        self.vision = VisionBranch(cfg.backbone, rng=rng) if cfg.has_vision else None
        self.temporal = TemporalBranch(cfg.temporal, rng=rng) if cfg.has_temporal else None

        if cfg.variant in ("gated", "no_gate"):
            fusion_cfg = FusionConfig(
                visual_dim=self.vision.feature_dim,
                temporal_dim=self.temporal.feature_dim,
                embed_dim=cfg.embed_dim,
                head_hidden=cfg.head_hidden,
                mode=cfg.attention_mode,
                param_budget=cfg.fusion_param_budget,
            )
            self.fusion = FusionBlock(fusion_cfg, rng=rng)
        elif cfg.variant == "late_fusion":
            self.fusion = LateFusionHead(
                self.vision.feature_dim, self.temporal.feature_dim,
                hidden=cfg.head_hidden, rng=rng,
            )
        elif cfg.variant == "vision_only":
            self.fusion = UnimodalRiskHead(self.vision.feature_dim,
                                           cfg.head_hidden, rng=rng)
        else:  # temporal_only
            self.fusion = UnimodalRiskHead(self.temporal.feature_dim,
                                           cfg.head_hidden, rng=rng)

        self.anchors = generate_anchors(cfg.backbone) if cfg.has_vision else None

    # -- forward ----------------------------------------------------------

    def forward(self, image: Tensor | None = None,
                window: Tensor | None = None) -> ModelOutput:
        cfg = self.cfg
        if cfg.has_vision and image is None:
            raise ShapeError(f"variant {cfg.variant!r} requires an image input")
        if cfg.has_temporal and window is None:
            raise ShapeError(f"variant {cfg.variant!r} requires a sensor window")

        box = cls = obj = f_v = None
        visual_tokens = None
        if cfg.has_vision:
            feats, f_v = self.vision.backbone(image)
            box, cls, obj = self.vision.heads_from_features(feats)
            if cfg.variant in ("gated", "no_gate") and cfg.attention_mode == "multi_token":
                finest = feats[cfg.backbone.pyramid_levels[0]]
                b, c, h, w = finest.shape
                visual_tokens = transpose(reshape(finest, (b, c, h * w)), (0, 2, 1))

        f_t = None
        temporal_tokens = None
        if cfg.has_temporal:
            if cfg.variant in ("gated", "no_gate") and cfg.attention_mode == "multi_token":
                tokens = self.temporal.forward_tokens(window)
                temporal_tokens = transpose(tokens, (0, 2, 1))
                f_t = tokens.mean(axis=2)
            else:
                f_t = self.temporal(window)

        fusion_state = None
        if cfg.variant in ("gated", "no_gate"):
            gate_mode = "learned" if cfg.variant == "gated" else "on"
            fusion_state = self.fusion(
                f_v, f_t, visual_tokens=visual_tokens,
                temporal_tokens=temporal_tokens, gate_mode=gate_mode,
            )
            risk_logit, risk = fusion_state.risk_logit, fusion_state.risk
        elif cfg.variant == "late_fusion":
            risk_logit, risk = self.fusion(f_v, f_t)
        elif cfg.variant == "vision_only":
            risk_logit, risk = self.fusion(f_v)
        else:
            risk_logit, risk = self.fusion(f_t)

        return ModelOutput(box, cls, obj, f_v, f_t, risk_logit, risk, fusion_state)

    # -- inference conveniences --------------------------------------------

    def detect(self, image: Tensor):
        """Run the vision branch and return final per-image detection lists."""
        if not self.cfg.has_vision:
            raise ShapeError("temporal_only model has no detector")
        box, cls, obj, _ = self.vision(image)
        out = []
        for i in range(box.shape[0]):
            out.append(
                detections_from_raw(box.data[i], cls.data[i], obj.data[i],
                                    self.anchors, self.cfg.backbone)
            )
        return out


def build_model(cfg: ModelConfig) -> CrossModalModel:
    """Construct a model with the reproducible seed recorded in its config."""
    return CrossModalModel(cfg, rng=np.random.default_rng(cfg.seed))
