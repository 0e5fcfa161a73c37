"""Detection branch: small mobile backbone, feature pyramid, anchors, NMS.

The trunk follows the MobileNetV3-Small recipe (inverted residual blocks
with optional squeeze-excite, hard-swish activations, width multiplier).
Pyramid levels P3/P4/P5 tap the trunk at strides 8/16/32; P6/P7 are derived
with stride-2 convolutions.  Per-level heads emit box regressions, class
logits, and an objectness logit per anchor; objectness is folded into the
class scores by multiplication before suppression.

Spatial downsampling uses stride-2 convolutions with symmetric padding
kernel//2, so odd extents round up (13 -> 7 -> 4): the output formula
floor((n + 2*(k//2) - k)/2) + 1 equals ceil(n/2) for odd k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    Activation,
    BatchNorm2d,
    Conv2d,
    Module,
    ModuleList,
    ShapeError,
    Tensor,
    concat,
    global_avg_pool2d,
    reshape,
    sigmoid,
    transpose,
)

# (kernel, expansion, out_channels, squeeze_excite, activation, stride)
# at multiplier 1.0 — the MobileNetV3-Small block table.
DEFAULT_STAGE_TABLE = (
    (3, 16, 16, True, "relu", 2),
    (3, 72, 24, False, "relu", 2),
    (3, 88, 24, False, "relu", 1),
    (5, 96, 40, True, "hardswish", 2),
    (5, 240, 40, True, "hardswish", 1),
    (5, 240, 40, True, "hardswish", 1),
    (5, 120, 48, True, "hardswish", 1),
    (5, 144, 48, True, "hardswish", 1),
    (5, 288, 96, True, "hardswish", 2),
    (5, 576, 96, True, "hardswish", 1),
    (5, 576, 96, True, "hardswish", 1),
)

STEM_CHANNELS = 16
TRUNK_STRIDE = 32  # stem (2) times four stride-2 blocks
LEVEL_STRIDES = {"P3": 8, "P4": 16, "P5": 32, "P6": 64, "P7": 128}

CLASS_NAMES = (
    "e_coli",
    "total_coliform",
    "pseudomonas",
    "enterococcus",
    "giardia",
    "microplastics",
    "algae",
    "inorganic",
)
N_CLASSES = len(CLASS_NAMES)
PATHOGEN_CLASS_IDS = (0, 1, 2, 3, 4)


def scale_channels(c: int, multiplier: float, divisor: int = 8) -> int:
    """Width-multiplied channel count, rounded to a hardware-friendly step."""
    return max(divisor, int(round(c * multiplier / divisor)) * divisor)


@dataclass
class BackboneConfig:
    width_multiplier: float = 0.75
    input_resolution: int = 416
    pyramid_levels: tuple = ("P3", "P4", "P5", "P6", "P7")
    stage_table: tuple = DEFAULT_STAGE_TABLE
    channel_divisor: int = 8
    n_classes: int = N_CLASSES
    anchor_scales: tuple = (1.0, 2.0 ** (1.0 / 3.0), 2.0 ** (2.0 / 3.0))
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    anchor_base_scale: float = 4.0  # anchor side = base_scale * stride pixels
    nms_iou: float = 0.45
    score_floor: float = 0.05

    def __post_init__(self):
        if self.width_multiplier <= 0:
            raise ValueError(f"width_multiplier must be positive, got {self.width_multiplier}")
        if not self.pyramid_levels:
            raise ValueError("at least one pyramid level required")
        unknown = [p for p in self.pyramid_levels if p not in LEVEL_STRIDES]
        if unknown:
            raise ValueError(f"unknown pyramid levels {unknown}")
        if self.input_resolution % TRUNK_STRIDE:
            raise ValueError(
                f"input_resolution {self.input_resolution} not divisible by trunk stride {TRUNK_STRIDE}"
            )

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def scaled(self, base_channels: int) -> int:
        return scale_channels(base_channels, self.width_multiplier, self.channel_divisor)

    def level_extent(self, level: str) -> int:
        """Feature-map side length at a pyramid level (ceil-mode halving)."""
        n = self.input_resolution
        halvings = int(np.log2(LEVEL_STRIDES[level]))
        for _ in range(halvings):
            n = (n + 1) // 2
        return n

    def to_dict(self) -> dict:
        return {
            "width_multiplier": self.width_multiplier,
            "input_resolution": self.input_resolution,
            "pyramid_levels": list(self.pyramid_levels),
            "stage_table": [list(row) for row in self.stage_table],
            "channel_divisor": self.channel_divisor,
            "n_classes": self.n_classes,
            "anchor_scales": list(self.anchor_scales),
            "anchor_ratios": list(self.anchor_ratios),
            "anchor_base_scale": self.anchor_base_scale,
            "nms_iou": self.nms_iou,
            "score_floor": self.score_floor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        for key in ("pyramid_levels", "anchor_scales", "anchor_ratios"):
            if key in d:
                d[key] = tuple(d[key])
        if "stage_table" in d:
            d["stage_table"] = tuple(tuple(row) for row in d["stage_table"])
        return cls(**d)

    @classmethod
    def paper_preset(cls) -> "BackboneConfig":
        return cls()

    @classmethod
    def tiny_preset(cls) -> "BackboneConfig":
        # base_scale shrinks with the canvas so anchors still bracket the
        # few-pixel objects that fit in a 64 px frame
        return cls(
            width_multiplier=0.25,
            input_resolution=64,
            pyramid_levels=("P3", "P4", "P5"),
            channel_divisor=4,
            anchor_base_scale=1.5,
        )


@dataclass
class Detection:
    class_id: int
    score: float
    box: tuple  # (x1, y1, x2, y2) normalized corners

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0,1]")


# ---------------------------------------------------------------------------
# trunk modules
# ---------------------------------------------------------------------------


class SqueezeExcite(Module):
    """Global pooling bottleneck that rescales channels multiplicatively."""

    def __init__(self, channels: int, reduction: int = 4, rng=None):
        super().__init__()
        hidden = max(4, channels // reduction)
        self.fc_reduce = Conv2d(channels, hidden, 1, rng=rng)
        self.fc_expand = Conv2d(hidden, channels, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        b, c = x.shape[0], x.shape[1]
        pooled = reshape(global_avg_pool2d(x), (b, c, 1, 1))
        gate = sigmoid(self.fc_expand(Activation("relu")(self.fc_reduce(pooled))))
        return x * gate


class InvertedResidual(Module):
    """expand 1x1 -> depthwise kxk -> [SE] -> project 1x1, residual on match.

    The expansion convolution is always materialized (even when the expansion
    width equals the input width) so that structured channel pruning has a
    uniform target in every block.
    """

    def __init__(self, in_ch: int, exp_ch: int, out_ch: int, kernel: int,
                 stride: int, use_se: bool, act: str, rng=None):
        super().__init__()
        self.in_ch, self.exp_ch, self.out_ch = in_ch, exp_ch, out_ch
        self.kernel, self.stride, self.use_se = kernel, stride, use_se
        self.act_name = act
        self.expand = Conv2d(in_ch, exp_ch, 1, bias=False, rng=rng)
        self.bn_expand = BatchNorm2d(exp_ch)
        self.dw = Conv2d(exp_ch, exp_ch, kernel, stride=stride,
                         padding=kernel // 2, groups=exp_ch, bias=False, rng=rng)
        self.bn_dw = BatchNorm2d(exp_ch)
        self.se = SqueezeExcite(exp_ch, rng=rng) if use_se else None
        self.project = Conv2d(exp_ch, out_ch, 1, bias=False, rng=rng)
        self.bn_project = BatchNorm2d(out_ch)
        self.act = Activation(act)
        self.residual = stride == 1 and in_ch == out_ch

    def forward(self, x: Tensor) -> Tensor:
        y = self.act(self.bn_expand(self.expand(x)))
        y = self.act(self.bn_dw(self.dw(y)))
        if self.se is not None:
            y = self.se(y)
        y = self.bn_project(self.project(y))
        if self.residual:
            y = y + x
        return y


class _ConvBNAct(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, act="hardswish", rng=None):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, kernel, stride=stride,
                           padding=kernel // 2, bias=False, rng=rng)
        self.bn = BatchNorm2d(out_ch)
        self.act = Activation(act)

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class Backbone(Module):
    """Trunk plus extra-stride pyramid convolutions.

    ``forward`` returns {level: feature map} for the configured levels and
    the pooled visual feature f_v taken from the highest-resolution level.
    """

    def __init__(self, cfg: BackboneConfig, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        stem_ch = cfg.scaled(STEM_CHANNELS)
        self.stem = _ConvBNAct(3, stem_ch, 3, stride=2, act="hardswish", rng=rng)

        blocks = []
        self._taps = {}  # block index -> level name
        in_ch = stem_ch
        stride_now = 2
        for i, (k, exp, out, se, act, s) in enumerate(cfg.stage_table):
            blocks.append(
                InvertedResidual(in_ch, cfg.scaled(exp), cfg.scaled(out), k, s,
                                 se, act, rng=rng)
            )
            in_ch = cfg.scaled(out)
            stride_now *= s
        self.blocks = ModuleList(blocks)

        # last block at each trunk stride feeds the matching pyramid level
        stride_now = 2
        last_at_stride = {}
        for i, (_, _, _, _, _, s) in enumerate(cfg.stage_table):
            stride_now *= s
            last_at_stride[stride_now] = i
        for level in ("P3", "P4", "P5"):
            if level in cfg.pyramid_levels:
                self._taps[last_at_stride[LEVEL_STRIDES[level]]] = level

        p5_ch = cfg.scaled(cfg.stage_table[-1][2])
        self.level_channels = {}
        for level in cfg.pyramid_levels:
            if level in ("P3", "P4", "P5"):
                stride = LEVEL_STRIDES[level]
                idx = last_at_stride[stride]
                self.level_channels[level] = cfg.scaled(cfg.stage_table[idx][2])
        self.extra = ModuleList()
        prev = p5_ch
        for level in ("P6", "P7"):
            if level in cfg.pyramid_levels:
                self.extra.append(_ConvBNAct(prev, p5_ch, 3, stride=2, rng=rng))
                self.level_channels[level] = p5_ch
                prev = p5_ch

    @property
    def feature_dim(self) -> int:
        """Dimensionality of f_v (channels of the finest pyramid level)."""
        finest = self.cfg.pyramid_levels[0]
        return self.level_channels[finest]

    def forward(self, image: Tensor):
        r = self.cfg.input_resolution
        if image.ndim != 4 or image.shape[1] != 3 or image.shape[2:] != (r, r):
            raise ShapeError(
                f"expected image batch (B,3,{r},{r}), got {image.shape}"
            )
        x = self.stem(image)
        feats = {}
        for i, block in enumerate(self.blocks):
            x = block(x)
            level = self._taps.get(i)
            if level is not None:
                feats[level] = x
        extra_iter = iter(self.extra)
        for level in ("P6", "P7"):
            if level in self.cfg.pyramid_levels:
                x = next(extra_iter)(x)
                feats[level] = x
        ordered = {lv: feats[lv] for lv in self.cfg.pyramid_levels}
        finest = self.cfg.pyramid_levels[0]
        f_v = global_avg_pool2d(ordered[finest])
        return ordered, f_v


class DetectionHead(Module):
    """Per-level 3x3 convolutions for boxes, class logits, and objectness."""

    def __init__(self, in_ch: int, n_classes: int, anchors_per_cell: int, rng=None):
        super().__init__()
        a = anchors_per_cell
        self.n_classes = n_classes
        self.anchors_per_cell = a
        self.box = Conv2d(in_ch, a * 4, 3, padding=1, rng=rng)
        self.cls = Conv2d(in_ch, a * n_classes, 3, padding=1, rng=rng)
        self.obj = Conv2d(in_ch, a, 3, padding=1, rng=rng)

    def forward(self, feat: Tensor):
        return self.box(feat), self.cls(feat), self.obj(feat)


class VisionBranch(Module):
    """Backbone plus detection heads; also exposes the pooled feature f_v."""

    def __init__(self, cfg: BackboneConfig, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng=rng)
        self.heads = ModuleList(
            DetectionHead(self.backbone.level_channels[lv], cfg.n_classes,
                          cfg.anchors_per_cell, rng=rng)
            for lv in cfg.pyramid_levels
        )

    @property
    def feature_dim(self) -> int:
        return self.backbone.feature_dim

    def heads_from_features(self, feats: dict):
        """Flattened (box_regs (B,N,4), cls_logits (B,N,C), obj_logits (B,N))."""
        boxes, clses, objs = [], [], []
        for head, lv in zip(self.heads, self.cfg.pyramid_levels):
            b, c, o = head(feats[lv])
            boxes.append(_flatten_head(b, 4))
            clses.append(_flatten_head(c, self.cfg.n_classes))
            objs.append(_flatten_head(o, 1))
        box = concat(boxes, axis=1)
        cls = concat(clses, axis=1)
        obj = reshape(concat(objs, axis=1), (box.shape[0], box.shape[1]))
        return box, cls, obj

    def forward(self, image: Tensor):
        """Returns (box_regs (B,N,4), cls_logits (B,N,C), obj_logits (B,N), f_v)."""
        feats, f_v = self.backbone(image)
        box, cls, obj = self.heads_from_features(feats)
        return box, cls, obj, f_v


def _flatten_head(t: Tensor, per_anchor: int) -> Tensor:
    """(B, A*k, H, W) -> (B, H*W*A, k): row-major cells, then per-cell anchors."""
    b, ak, h, w = t.shape
    a = ak // per_anchor
    t = reshape(t, (b, a, per_anchor, h, w))
    t = transpose(t, (0, 3, 4, 1, 2))  # B,H,W,A,k
    return reshape(t, (b, h * w * a, per_anchor))


# ---------------------------------------------------------------------------
# anchors, box geometry, suppression — plain numpy, no gradients
# ---------------------------------------------------------------------------


def level_anchor_grid(grid: int, base_size: float, scales, ratios) -> np.ndarray:
    """Anchors for one level: (grid*grid*|scales|*|ratios|, 4) as cx,cy,w,h.

    Ordering: row-major cells, then scale-major, ratio-minor within a cell.
    Width/height convention: width = side*sqrt(ratio), height = side/sqrt(ratio).
    """
    out = np.empty((grid, grid, len(scales), len(ratios), 4), dtype=np.float64)
    centers = (np.arange(grid) + 0.5) / grid
    for si, s in enumerate(scales):
        for ri, r in enumerate(ratios):
            side = base_size * s
            w = side * np.sqrt(r)
            h = side / np.sqrt(r)
            out[:, :, si, ri, 2] = w
            out[:, :, si, ri, 3] = h
    out[:, :, :, :, 0] = centers[None, :, None, None]  # cx varies along columns
    out[:, :, :, :, 1] = centers[:, None, None, None]  # cy varies along rows
    return out.reshape(-1, 4)


def generate_anchors(cfg: BackboneConfig) -> np.ndarray:
    """All anchors in head-output order: level-major, row-major, scale, ratio."""
    parts = []
    for level in cfg.pyramid_levels:
        grid = cfg.level_extent(level)
        base = cfg.anchor_base_scale * LEVEL_STRIDES[level] / cfg.input_resolution
        parts.append(level_anchor_grid(grid, base, cfg.anchor_scales, cfg.anchor_ratios))
    return np.concatenate(parts, axis=0)


def decode_boxes(raw: np.ndarray, anchors: np.ndarray, clip: bool = True) -> np.ndarray:
    """(tx,ty,tw,th) offsets -> corner boxes; log-space size deltas."""
    cx = anchors[:, 0] + raw[:, 0] * anchors[:, 2]
    cy = anchors[:, 1] + raw[:, 1] * anchors[:, 3]
    w = anchors[:, 2] * np.exp(raw[:, 2])
    h = anchors[:, 3] * np.exp(raw[:, 3])
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    if clip:
        boxes = np.clip(boxes, 0.0, 1.0)
    return boxes


def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Inverse of decode_boxes for unclipped boxes."""
    cx = (boxes[:, 0] + boxes[:, 2]) / 2
    cy = (boxes[:, 1] + boxes[:, 3]) / 2
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return np.stack(
        [
            (cx - anchors[:, 0]) / anchors[:, 2],
            (cy - anchors[:, 1]) / anchors[:, 3],
            np.log(w / anchors[:, 2]),
            np.log(h / anchors[:, 3]),
        ],
        axis=1,
    )


def anchors_as_corners(anchors: np.ndarray) -> np.ndarray:
    half_w, half_h = anchors[:, 2] / 2, anchors[:, 3] / 2
    return np.stack(
        [anchors[:, 0] - half_w, anchors[:, 1] - half_h,
         anchors[:, 0] + half_w, anchors[:, 1] + half_h],
        axis=1,
    )


def iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N,4) and (M,4) corner boxes -> (N,M)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray,
        iou_threshold: float = 0.45) -> list:
    """Greedy class-wise suppression; ties broken toward the lower index.

    Returns indices of survivors ordered by descending score.
    """
    n = len(scores)
    if n == 0:
        return []
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    ious = iou(boxes, boxes)
    alive = np.ones(n, dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        same = (classes == classes[i]) & alive
        same[i] = False
        alive &= ~(same & (ious[i] > iou_threshold))
    return keep


def detections_from_raw(box_regs: np.ndarray, cls_logits: np.ndarray,
                        obj_logits: np.ndarray, anchors: np.ndarray,
                        cfg: BackboneConfig) -> list:
    """Decode one image's raw head outputs into a final detection list."""
    boxes = decode_boxes(box_regs, anchors)
    cls = np.asarray(cls_logits, dtype=np.float64)
    cls_prob = np.exp(cls - cls.max(axis=1, keepdims=True))
    cls_prob /= cls_prob.sum(axis=1, keepdims=True)
    obj = 1.0 / (1.0 + np.exp(-np.asarray(obj_logits, dtype=np.float64)))
    scores = obj[:, None] * cls_prob  # objectness folded multiplicatively

    flat_scores, flat_classes, flat_boxes = [], [], []
    for c in range(cfg.n_classes):
        mask = scores[:, c] >= cfg.score_floor
        if not mask.any():
            continue
        flat_scores.append(scores[mask, c])
        flat_classes.append(np.full(mask.sum(), c))
        flat_boxes.append(boxes[mask])
    if not flat_scores:
        return []
    s = np.concatenate(flat_scores)
    k = np.concatenate(flat_classes)
    b = np.concatenate(flat_boxes)
    valid = (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1])
    s, k, b = s[valid], k[valid], b[valid]
    keep = nms(b, s, k, cfg.nms_iou)
    return [Detection(int(k[i]), float(s[i]), tuple(b[i])) for i in keep]
