"""Metrics and statistical tests for detection, risk, and field performance.

Detection quality is mAP@0.5 with greedy highest-score-first matching and
all-point (precision envelope) interpolation.  Risk quality uses ROC-AUC,
expected calibration error over 15 equal-width bins, and temperature
scaling.  Paired comparisons use McNemar and Wilcoxon signed-rank tests;
annotation agreement uses Fleiss' kappa.  Field performance counts
unconfirmed alerts (FPR) and missed events (FNR) under an interval-overlap
matching window.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

DEFAULT_IOU = 0.5
DEFAULT_ECE_BINS = 15
DEFAULT_MATCH_WINDOW = 24 * 3600.0  # alert-to-event overlap slack, seconds


# ---------------------------------------------------------------------------
# detection: mAP@0.5
# ---------------------------------------------------------------------------


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


@dataclass
class PRCurve:
    per_class_ap: dict
    mean_ap: float
    curves: dict = field(default_factory=dict)  # class -> (recall, precision)
    skipped_classes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "mAP": self.mean_ap,
            "skipped_classes": list(self.skipped_classes),
            "curves": {
                str(k): {"recall": r.tolist(), "precision": p.tolist()}
                for k, (r, p) in self.curves.items()
            },
        }


def _envelope_ap(tp: np.ndarray, n_gt: int):
    """All-point interpolated AP plus the (recall, precision) curve."""
    fp = 1.0 - tp
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[1.0], precision])
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    idx = np.where(np.diff(r) > 0)[0]
    ap = float(np.sum((r[idx + 1] - r[idx]) * p[idx + 1]))
    return ap, recall, precision


def map50(predictions: list, ground_truth: list, iou_threshold: float = DEFAULT_IOU,
          n_classes: int = 8) -> PRCurve:
    """mAP@IoU over a list of images.

    ``predictions[i]``: dict with 'boxes' (P,4), 'scores' (P,), 'classes' (P,).
    ``ground_truth[i]``: dict with 'boxes' (G,4), 'classes' (G,).
    Matching is greedy per class: predictions in descending score order claim
    their highest-IoU unmatched ground-truth box (ties: earlier image, then
    earlier prediction index, then lower gt index).  Classes without any
    ground truth are excluded from the mean with a warning.
    """
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground_truth must align per image")
    per_class_ap = {}
    curves = {}
    skipped = []
    for cid in range(n_classes):
        entries = []  # (-score, image_idx, pred_idx, box)
        n_gt = 0
        for img, (preds, gts) in enumerate(zip(predictions, ground_truth)):
            pc = np.asarray(preds.get("classes", []))
            sel = np.where(pc == cid)[0]
            boxes = np.asarray(preds.get("boxes", np.zeros((0, 4))), dtype=float)
            scores = np.asarray(preds.get("scores", []), dtype=float)
            for j in sel:
                entries.append((-float(scores[j]), img, int(j), boxes[j]))
            gc = np.asarray(gts.get("classes", []))
            n_gt += int((gc == cid).sum())
        if n_gt == 0:
            if entries:
                skipped.append(cid)
            continue
        entries.sort(key=lambda e: (e[0], e[1], e[2]))
        matched = {}  # image -> bool array over that image's gt boxes of cid
        tp = np.zeros(len(entries))
        for rank, (_, img, _, box) in enumerate(entries):
            gts = ground_truth[img]
            gc = np.asarray(gts.get("classes", []))
            gt_idx = np.where(gc == cid)[0]
            if len(gt_idx) == 0:
                continue
            gboxes = np.asarray(gts["boxes"], dtype=float)[gt_idx]
            if img not in matched:
                matched[img] = np.zeros(len(gt_idx), dtype=bool)
            ious = _iou_matrix(box[None], gboxes)[0]
            ious[matched[img]] = -1.0
            best = int(np.argmax(ious))
            if ious[best] >= iou_threshold:
                matched[img][best] = True
                tp[rank] = 1.0
        ap, recall, precision = _envelope_ap(tp, n_gt)
        per_class_ap[cid] = ap
        curves[cid] = (recall, precision)
    if skipped:
        warnings.warn(
            f"classes {skipped} have predictions but no ground truth; "
            "excluded from mAP", stacklevel=2,
        )
    mean_ap = float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0
    return PRCurve(per_class_ap, mean_ap, curves, skipped)


def detections_to_arrays(dets: list) -> dict:
    """Convert a list of Detection objects to the map50 input layout."""
    return {
        "boxes": np.array([d.box for d in dets], dtype=float).reshape(-1, 4),
        "scores": np.array([d.score for d in dets], dtype=float),
        "classes": np.array([d.class_id for d in dets], dtype=int),
    }


# ---------------------------------------------------------------------------
# risk-score quality
# ---------------------------------------------------------------------------


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC; ties contribute half credit via midranks."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    ranks = stats.rankdata(scores)
    r_pos = ranks[labels == 1].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class CalibrationReport:
    bin_edges: np.ndarray
    bin_confidence: np.ndarray
    bin_accuracy: np.ndarray
    bin_counts: np.ndarray
    ece: float
    temperature: float | None = None

    def to_dict(self) -> dict:
        return {
            "bin_edges": self.bin_edges.tolist(),
            "bin_confidence": self.bin_confidence.tolist(),
            "bin_accuracy": self.bin_accuracy.tolist(),
            "bin_counts": self.bin_counts.tolist(),
            "ece": self.ece,
            "temperature": self.temperature,
        }


def ece(scores, labels, n_bins: int = DEFAULT_ECE_BINS) -> CalibrationReport:
    """Expected calibration error over equal-width bins on [0, 1]."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if scores.min() < 0 or scores.max() > 1:
        raise ValueError("scores must lie in [0, 1]")
    idx = np.minimum((scores * n_bins).astype(int), n_bins - 1)
    conf = np.zeros(n_bins)
    acc = np.zeros(n_bins)
    counts = np.zeros(n_bins, dtype=int)
    for b in range(n_bins):
        mask = idx == b
        counts[b] = int(mask.sum())
        if counts[b]:
            conf[b] = scores[mask].mean()
            acc[b] = labels[mask].mean()
    total = counts.sum()
    value = float(np.sum(counts / total * np.abs(acc - conf)))
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    return CalibrationReport(edges, conf, acc, counts, value)


def _sigmoid_nll(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    z = logits / temperature
    return float(np.mean(np.logaddexp(0.0, z) - z * labels))


def temperature_scale(logits, labels, tol: float = 1e-7) -> float:
    """Scalar T > 0 minimizing the NLL of sigmoid(logit / T)."""
    logits = np.asarray(logits, dtype=float).reshape(-1)
    labels = np.asarray(labels, dtype=float).reshape(-1)
    if len(np.unique(labels)) < 2:
        raise ValueError("temperature scaling needs both label classes")
    res = optimize.minimize_scalar(
        lambda t: _sigmoid_nll(logits, labels, t),
        bounds=(1e-2, 100.0), method="bounded",
        options={"xatol": tol},
    )
    return float(res.x)


# ---------------------------------------------------------------------------
# paired tests and agreement
# ---------------------------------------------------------------------------


def mcnemar(correct_a, correct_b):
    """Continuity-corrected McNemar test on paired correctness vectors.

    Returns (statistic, p).  With fewer than 25 discordant pairs the p-value
    comes from the exact two-sided binomial instead of the chi-square.
    """
    a = np.asarray(correct_a, dtype=bool)
    b = np.asarray(correct_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("paired vectors must have equal length")
    n_b = int((a & ~b).sum())  # A right, B wrong
    n_c = int((~a & b).sum())  # A wrong, B right
    n = n_b + n_c
    if n == 0:
        raise ValueError("no discordant pairs; test undefined")
    stat = (abs(n_b - n_c) - 1) ** 2 / n
    if n < 25:
        k = min(n_b, n_c)
        p = min(1.0, 2.0 * float(stats.binom.cdf(k, n, 0.5)))
    else:
        p = float(stats.chi2.sf(stat, df=1))
    return float(stat), p


def wilcoxon_signed_rank(diffs, alternative: str = "two-sided"):
    """Signed-rank test: zeros dropped, midranks for ties.

    Exact distribution (dynamic program over rank sums) for n <= 12, normal
    approximation with tie correction and continuity correction otherwise.
    Returns (w_minus, p).
    """
    d = np.asarray(diffs, dtype=float)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise ValueError("all paired differences are zero")
    ranks = stats.rankdata(np.abs(d))
    w_minus = float(ranks[d < 0].sum())
    w_plus = float(ranks[d > 0].sum())

    if n <= 12:
        # half-unit integer ranks make the DP exact despite midranks
        r2 = np.round(ranks * 2).astype(int)
        total2 = int(r2.sum())
        counts = np.zeros(total2 + 1, dtype=np.int64)
        counts[0] = 1
        for r in r2:
            counts[r:] += counts[:-r].copy()
        denom = float(2**n)
        values = np.arange(total2 + 1)
        if alternative == "greater":
            p = counts[values <= round(w_minus * 2)].sum() / denom
        elif alternative == "less":
            p = counts[values <= round(w_plus * 2)].sum() / denom
        else:
            m = round(min(w_minus, w_plus) * 2)
            below = np.minimum(values, total2 - values) <= m
            p = counts[below].sum() / denom
        return w_minus, float(min(p, 1.0))

    mean = n * (n + 1) / 4.0
    tie_groups = np.unique(np.abs(d), return_counts=True)[1]
    tie_term = float(np.sum(tie_groups**3 - tie_groups)) / 48.0
    sd = np.sqrt(n * (n + 1) * (2 * n + 1) / 24.0 - tie_term)
    if alternative == "greater":
        z = (w_minus - mean + 0.5) / sd
        p = float(stats.norm.cdf(z))
    elif alternative == "less":
        z = (w_plus - mean + 0.5) / sd
        p = float(stats.norm.cdf(z))
    else:
        w = min(w_minus, w_plus)
        z = (w - mean + 0.5) / sd
        p = float(min(1.0, 2.0 * stats.norm.cdf(z)))
    return w_minus, p


def fleiss_kappa(counts) -> float:
    """Agreement over an items x categories table of rating counts."""
    counts = np.asarray(counts, dtype=float)
    if counts.ndim != 2:
        raise ValueError("counts must be items x categories")
    raters = counts.sum(axis=1)
    if not np.all(raters == raters[0]):
        raise ValueError("every item needs the same number of ratings")
    n_raters = float(raters[0])
    if n_raters < 2:
        raise ValueError("need at least two raters")
    p_i = (np.sum(counts * (counts - 1), axis=1)) / (n_raters * (n_raters - 1))
    p_bar = float(p_i.mean())
    p_j = counts.sum(axis=0) / counts.sum()
    p_e = float(np.sum(p_j**2))
    if p_e == 1.0:
        return 1.0
    return (p_bar - p_e) / (1.0 - p_e)


# ---------------------------------------------------------------------------
# field accounting
# ---------------------------------------------------------------------------


@dataclass
class FieldRates:
    fpr: float | None
    fnr: float | None
    n_alerts: int
    n_events: int
    confirmed_alerts: int
    detected_events: int

    def to_dict(self) -> dict:
        return {
            "fpr": self.fpr,
            "fnr": self.fnr,
            "n_alerts": self.n_alerts,
            "n_events": self.n_events,
            "confirmed_alerts": self.confirmed_alerts,
            "detected_events": self.detected_events,
        }


def field_rates(alert_times, events, matching_window: float = DEFAULT_MATCH_WINDOW
                ) -> FieldRates:
    """FPR = unconfirmed alerts / alerts; FNR = missed events / events.

    An alert at time t confirms an event (s, e) when t falls inside
    [s - window, e + window]; denominators of zero yield None rates.
    """
    alert_times = np.asarray(list(alert_times), dtype=float)
    events = [(float(s), float(e)) for s, e in events]
    for s, e in events:
        if s >= e:
            raise ValueError(f"event interval ({s}, {e}) is empty")
    confirmed = 0
    for t in alert_times:
        if any(s - matching_window <= t <= e + matching_window for s, e in events):
            confirmed += 1
    detected = 0
    for s, e in events:
        lo, hi = s - matching_window, e + matching_window
        if np.any((alert_times >= lo) & (alert_times <= hi)):
            detected += 1
    n_alerts = len(alert_times)
    n_events = len(events)
    fpr = None if n_alerts == 0 else (n_alerts - confirmed) / n_alerts
    fnr = None if n_events == 0 else (n_events - detected) / n_events
    return FieldRates(fpr, fnr, n_alerts, n_events, confirmed, detected)


def write_metrics_report(path, report: dict):
    """Serialize a metrics dictionary to stable, diff-friendly JSON."""
    from pathlib import Path

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=1, sort_keys=True)
        f.write("\n")
