"""Joint training: detection loss + anomaly loss, Adam, cosine decay.

The detection loss pairs smooth-L1 box regression with focal classification.
Focal weighting is applied twice — to the binary objectness logit over all
matched/negative anchors (no hard-negative mining) and to the softmax class
probabilities of positive anchors.  The anomaly term is a
binary-cross-entropy on the risk logit.  Total: L = L_det + lambda * L_anom.

Anchor matching is the usual two-threshold scheme: IoU >= pos makes an
anchor positive, IoU < neg makes it negative, the band between is ignored,
and each ground-truth box additionally claims its single best-overlapping
anchor (processed in box order; ties go to the lower anchor index).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import CrossModalModel
from .nn import (
    Tensor,
    absolute,
    exp,
    gather_rows,
    log,
    power,
    reshape,
    sigmoid,
    softplus,
    tsum,
)
from .vision import anchors_as_corners, encode_boxes, iou

POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.4


class LeakageError(RuntimeError):
    """A non-training sample reached the parameter-update path."""


class TrainingDivergenceError(RuntimeError):
    """Loss became non-finite; carries the offending step's diagnostics."""


@dataclass
class TrainConfig:
    lambda_anom: float = 1.0
    lr: float = 1e-3
    lr_min: float = 1e-5
    batch_size: int = 32
    epochs: int = 10
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    pos_iou: float = POSITIVE_IOU
    neg_iou: float = NEGATIVE_IOU
    smooth_l1_beta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lambda_anom < 0:
            raise ValueError("lambda_anom must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.pos_iou < self.neg_iou:
            raise ValueError("positive IoU threshold below negative threshold")

    def to_dict(self) -> dict:
        return {
            "lambda_anom": self.lambda_anom,
            "lr": self.lr,
            "lr_min": self.lr_min,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "focal_gamma": self.focal_gamma,
            "focal_alpha": self.focal_alpha,
            "pos_iou": self.pos_iou,
            "neg_iou": self.neg_iou,
            "smooth_l1_beta": self.smooth_l1_beta,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


IGNORE = -2
NEGATIVE = -1


def match_anchors(anchors: np.ndarray, gt_boxes: np.ndarray,
                  pos_iou: float = POSITIVE_IOU,
                  neg_iou: float = NEGATIVE_IOU) -> np.ndarray:
    """Per-anchor assignment: gt index (>=0), NEGATIVE (-1), or IGNORE (-2)."""
    n = len(anchors)
    assign = np.full(n, NEGATIVE, dtype=np.int64)
    if len(gt_boxes) == 0:
        return assign
    ious = iou(anchors_as_corners(anchors), np.asarray(gt_boxes, dtype=np.float64))
    best_iou = ious.max(axis=1)
    best_gt = ious.argmax(axis=1)
    assign[(best_iou >= neg_iou) & (best_iou < pos_iou)] = IGNORE
    positive = best_iou >= pos_iou
    assign[positive] = best_gt[positive]
    for g in range(ious.shape[1]):  # every box claims its best anchor
        a = int(ious[:, g].argmax())
        if ious[a, g] > 0:
            assign[a] = g
    return assign


# ---------------------------------------------------------------------------
# loss primitives — all return un-normalized sums as graph Tensors
# ---------------------------------------------------------------------------


def focal_loss_probs(p: Tensor, targets: np.ndarray, gamma: float = 2.0,
                     alpha: float = 0.25) -> Tensor:
    """Focal loss on probabilities in (0,1); targets are hard 0/1 labels.

    Positive term: -alpha * (1-p)^gamma * log(p); negative term mirrors it
    with weight (1-alpha).  Sum reduction.
    """
    t = np.asarray(targets, dtype=np.float64)
    pos = alpha * power(1.0 - p, gamma) * (0.0 - log(p)) * Tensor(t)
    neg = (1.0 - alpha) * power(p, gamma) * (0.0 - log(1.0 - p)) * Tensor(1.0 - t)
    return tsum(pos + neg)


def focal_loss_logits(x: Tensor, targets: np.ndarray, gamma: float = 2.0,
                      alpha: float = 0.25) -> Tensor:
    """Numerically stable focal loss on raw logits: -log p = softplus(-x)."""
    t = np.asarray(targets, dtype=np.float64)
    pos = alpha * power(sigmoid(0.0 - x), gamma) * softplus(0.0 - x) * Tensor(t)
    neg = (1.0 - alpha) * power(sigmoid(x), gamma) * softplus(x) * Tensor(1.0 - t)
    return tsum(pos + neg)


def smooth_l1(pred: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Huber-style box loss: quadratic inside |d| <= beta, linear outside."""
    d = pred - Tensor(np.asarray(target, dtype=np.float64))
    a = absolute(d)
    inside = (a.data <= beta).astype(np.float64)  # constant mask; kink has measure zero
    quad = 0.5 * d * d * (1.0 / beta)
    lin = a - 0.5 * beta
    return tsum(quad * Tensor(inside) + lin * Tensor(1.0 - inside))


def bce_with_logits(x: Tensor, targets: np.ndarray) -> Tensor:
    """Binary cross-entropy on logits: softplus(x) - x*y, summed."""
    t = np.asarray(targets, dtype=np.float64)
    return tsum(softplus(x) - x * Tensor(t))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable log-softmax; the max shift is treated as a constant."""
    m = x.data.max(axis=axis, keepdims=True)
    z = x - Tensor(m)
    return z - log(tsum(exp(z), axis=axis, keepdims=True))


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    """Half-cosine decay from lr0 at step 0 to lr_min at step == total_steps."""
    if total_steps <= 0:
        return lr0
    frac = min(max(step / total_steps, 0.0), 1.0)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + np.cos(np.pi * frac))


# ---------------------------------------------------------------------------
# joint loss
# ---------------------------------------------------------------------------


def detection_loss(box_regs: Tensor, cls_logits: Tensor, obj_logits: Tensor,
                   anchors: np.ndarray, boxes_list, classes_list,
                   cfg: TrainConfig):
    """Summed detection terms over a batch, normalized by positive count.

    Returns (loss Tensor, components dict).
    """
    b = box_regs.shape[0]
    n = box_regs.shape[1]
    c = cls_logits.shape[2]

    obj_targets = np.zeros((b, n))
    obj_keep = np.ones((b, n))  # 0 on ignored anchors
    pos_rows = []  # (batch_idx, anchor_idx, gt_idx)
    for i in range(b):
        assign = match_anchors(anchors, boxes_list[i], cfg.pos_iou, cfg.neg_iou)
        obj_keep[i, assign == IGNORE] = 0.0
        pos = np.where(assign >= 0)[0]
        obj_targets[i, pos] = 1.0
        for a in pos:
            pos_rows.append((i, a, assign[a]))

    n_pos = max(len(pos_rows), 1)

    obj_flat = reshape(obj_logits, (b * n,))
    obj_loss = focal_loss_logits(
        obj_flat * Tensor(obj_keep.reshape(-1)),
        obj_targets.reshape(-1) * obj_keep.reshape(-1),
        cfg.focal_gamma, cfg.focal_alpha,
    )
    # masked-out entries contribute focal(0 logit, 0 target); subtract that
    # constant so ignored anchors are truly silent
    n_ignored = int((1.0 - obj_keep).sum())
    dead = (1.0 - cfg.focal_alpha) * (0.5**cfg.focal_gamma) * np.log(2.0)
    obj_loss = obj_loss - Tensor(np.asarray(n_ignored * dead))

    if pos_rows:
        rows = np.array([i * n + a for i, a, _ in pos_rows])
        gt_boxes = np.concatenate(
            [np.asarray(boxes_list[i])[g][None] for i, _, g in pos_rows], axis=0
        )
        gt_classes = np.array([int(classes_list[i][g]) for i, _, g in pos_rows])
        anchor_rows = np.array([a for _, a, _ in pos_rows])

        pred_regs = gather_rows(reshape(box_regs, (b * n, 4)), rows)
        target_regs = encode_boxes(gt_boxes, anchors[anchor_rows])
        box_loss = smooth_l1(pred_regs, target_regs, cfg.smooth_l1_beta)

        pos_cls = gather_rows(reshape(cls_logits, (b * n, c)), rows)
        logp = log_softmax(pos_cls, axis=1)
        logp_t = gather_rows(reshape(logp, (len(rows) * c,)),
                             np.arange(len(rows)) * c + gt_classes)
        p_t = exp(logp_t)
        cls_loss = tsum(cfg.focal_alpha * power(1.0 - p_t, cfg.focal_gamma)
                        * (0.0 - logp_t))
    else:
        box_loss = Tensor(np.asarray(0.0))
        cls_loss = Tensor(np.asarray(0.0))

    scale = 1.0 / n_pos
    total = (obj_loss + box_loss + cls_loss) * scale
    comps = {
        "det_obj": float(obj_loss.data) * scale,
        "det_box": float(box_loss.data) * scale,
        "det_cls": float(cls_loss.data) * scale,
        "n_pos": len(pos_rows),
    }
    return total, comps


def joint_loss(output, batch: dict, anchors: np.ndarray, cfg: TrainConfig):
    """L = L_det + lambda * L_anom over one batch; components for logging."""
    comps = {}
    if output.box_regs is not None:
        det, det_comps = detection_loss(
            output.box_regs, output.cls_logits, output.obj_logits, anchors,
            batch["boxes"], batch["classes"], cfg,
        )
        comps.update(det_comps)
    else:
        det = Tensor(np.asarray(0.0))
        comps.update({"det_obj": 0.0, "det_box": 0.0, "det_cls": 0.0, "n_pos": 0})

    labels = np.asarray(batch["anomaly"], dtype=np.float64).reshape(-1, 1)
    anom = bce_with_logits(output.risk_logit, labels) * (1.0 / len(labels))
    total = det + cfg.lambda_anom * anom
    comps["det"] = float(det.data)
    comps["anom"] = float(anom.data)
    comps["total"] = float(total.data)
    return total, comps


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def make_batch(samples) -> dict:
    return {
        "images": Tensor(np.stack([s["image"] for s in samples]))
        if samples[0].get("image") is not None else None,
        "windows": Tensor(np.stack([s["window"] for s in samples]))
        if samples[0].get("window") is not None else None,
        "boxes": [np.asarray(s.get("boxes", np.zeros((0, 4)))) for s in samples],
        "classes": [np.asarray(s.get("classes", np.zeros(0, dtype=int)))
                    for s in samples],
        "anomaly": np.array([s["anomaly"] for s in samples]),
    }


def train(model: CrossModalModel, samples: list, cfg: TrainConfig,
          log_path=None, progress=None):
    """Optimize ``model`` on training-split samples; returns epoch history.

    Every sample must carry split tag 'train' — anything else aborts before
    a single update, which is the data-leakage guard.
    """
    bad = {s.get("split") for s in samples} - {"train"}
    if bad:
        raise LeakageError(f"non-training samples passed to train(): {sorted(bad)}")
    if not samples:
        raise ValueError("empty training set")

    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    steps_per_epoch = max(1, int(np.ceil(len(samples) / cfg.batch_size)))
    total_steps = cfg.epochs * steps_per_epoch

    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a", encoding="utf-8")

    history = []
    step = 0
    try:
        model.train()
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(samples))
            sums = {}
            n_batches = 0
            for start in range(0, len(samples), cfg.batch_size):
                batch = make_batch([samples[i] for i in order[start:start + cfg.batch_size]])
                lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min)
                opt.zero_grad()
                out = model(image=batch["images"], window=batch["windows"])
                loss, comps = joint_loss(out, batch, model.anchors, cfg)
                if not np.isfinite(loss.data):
                    raise TrainingDivergenceError(
                        f"non-finite loss at epoch {epoch} step {step}: {comps}"
                    )
                loss.backward()
                opt.step(lr=lr)
                step += 1
                n_batches += 1
                for k, val in comps.items():
                    sums[k] = sums.get(k, 0.0) + val
            record = {
                "epoch": epoch,
                "lr": cosine_lr(step, total_steps, cfg.lr, cfg.lr_min),
                **{k: v / n_batches for k, v in sums.items()},
            }
            history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
            if progress is not None:
                progress(record)
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    return history
