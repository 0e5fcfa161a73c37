"""Independent reference implementations used to check the library.

Everything here is deliberately naive: loops, enumeration, and finite
differences.  None of it shares code with the implementations under test.
"""

from __future__ import annotations

import itertools

import numpy as np


def finite_difference_grads(f, arrays, step=1e-3):
    """Central-difference gradients of the scalar ``f()`` w.r.t. each array.

    ``f`` must recompute the forward pass from the arrays' current contents;
    the arrays are perturbed in place and restored.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    """max over elements of |a-n| / max(|a|,|n|), ignoring near-zero pairs."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def gradcheck(fn, arrays, rng, tol=1e-4, step=1e-3):
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` maps Tensors (built fresh around ``arrays`` on every call) to an
    output Tensor; the output is contracted to a scalar with a fixed random
    projection so every output element influences the loss.  Returns the
    worst relative error (and asserts it is under ``tol``).
    """
    from aquascan.nn import Tensor, tsum

    proj_holder = {}

    def forward(tensors):
        out = fn(*tensors)
        if "p" not in proj_holder:
            proj_holder["p"] = rng.standard_normal(out.data.shape)
        return tsum(out * Tensor(proj_holder["p"]))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = forward(leaves)
    loss.backward()
    analytic = [t.grad.copy() for t in leaves]

    numeric = finite_difference_grads(
        lambda: float(forward([Tensor(a) for a in arrays]).data), arrays, step=step
    )
    err = max_relative_error(analytic, numeric)
    assert err < tol, f"max relative gradient error {err:.3e} >= {tol}"
    return err


def module_gradcheck(module, x, rng, tol=1e-4, step=1e-3):
    """Finite-difference check of a Module's parameters and its input."""
    from aquascan.nn import Tensor, tsum

    params = [p for _, p in module.named_parameters()]
    arrays = [p.data for p in params] + [x]
    proj_holder = {}

    def forward():
        out = module.forward(Tensor(arrays[-1], requires_grad=True))
        if "p" not in proj_holder:
            proj_holder["p"] = rng.standard_normal(out.data.shape)
        return tsum(out * Tensor(proj_holder["p"]))

    xt = Tensor(x, requires_grad=True)
    out = module.forward(xt)
    proj_holder["p"] = rng.standard_normal(out.data.shape)
    loss = tsum(out * Tensor(proj_holder["p"]))
    for p in params:
        p.grad = None
    loss.backward()
    analytic = [p.grad.copy() for p in params] + [xt.grad.copy()]

    numeric = finite_difference_grads(lambda: float(forward().data), arrays, step=step)
    err = max_relative_error(analytic, numeric)
    assert err < tol, f"max relative gradient error {err:.3e} >= {tol}"
    return err


def iou_xyxy(a, b):
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix2 - ix1), max(0.0, iy2 - iy1)
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def brute_force_nms(boxes, scores, classes, iou_threshold):
    """O(n^2) greedy class-wise suppression; ties broken by lower index.

    Returns surviving indices ordered by (descending score, ascending index).
    """
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = []
    suppressed = [False] * len(scores)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        for j in order:
            if j == i or suppressed[j] or classes[j] != classes[i]:
                continue
            if iou_xyxy(boxes[i], boxes[j]) > iou_threshold:
                suppressed[j] = True
    return keep


def exhaustive_average_precision(preds, gts, iou_threshold=0.5):
    """AP for one class by trying every prediction->gt assignment.

    ``preds``: list of (score, box); ``gts``: list of boxes.  Enumerates all
    injective assignments of predictions to ground truths and selects the one
    a greedy highest-score-first matcher would produce: walking predictions
    in descending score order, prefer matched over unmatched, then higher
    IoU, then lower gt index.  Returns the all-point-interpolated AP of that
    assignment.  Only usable for tiny fixtures (<=6 preds / <=4 gts).
    """
    n, m = len(preds), len(gts)
    order = sorted(range(n), key=lambda i: (-preds[i][0], i))

    best_key = None
    best_tp_vector = [0] * n
    # enumerate which gt (or None) each prediction matches
    for assignment in itertools.product(range(-1, m), repeat=n):
        used = [a for a in assignment if a >= 0]
        if len(used) != len(set(used)):
            continue
        ok = True
        key = []
        for i in order:
            a = assignment[i]
            if a < 0:
                key.append((0, 0.0, 0))
                continue
            iou = iou_xyxy(preds[i][1], gts[a])
            if iou < iou_threshold:
                ok = False
                break
            key.append((1, iou, -a))
        if not ok:
            continue
        key = tuple(key)
        if best_key is None or key > best_key:
            best_key = key
            best_tp_vector = [1 if assignment[i] >= 0 else 0 for i in order]
    return _ap_from_tp(best_tp_vector, m)


def _ap_from_tp(tp, n_gt):
    if n_gt == 0:
        return float("nan")
    tp = np.asarray(tp, dtype=float)
    fp = 1.0 - tp
    ctp, cfp = np.cumsum(tp), np.cumsum(fp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    # all-point interpolation: area under the precision envelope
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    idx = np.where(r[1:] != r[:-1])[0]
    return float(np.sum((r[idx + 1] - r[idx]) * p[idx + 1]))


def softmax_weighted_sum(q, keys, values, scale):
    """Brute-force single-query attention over token lists."""
    logits = [float(np.dot(q, k)) * scale for k in keys]
    mx = max(logits)
    ws = [np.exp(l - mx) for l in logits]
    z = sum(ws)
    out = np.zeros_like(values[0], dtype=float)
    for w, v in zip(ws, values):
        out += (w / z) * v
    return out


def wilcoxon_exact_enumeration(diffs, alternative="two-sided"):
    """Exact signed-rank p by enumerating all 2^n sign patterns.

    Zeros are dropped; tied |diffs| get midranks.  Returns (w_minus, p).
    """
    d = np.asarray([x for x in diffs if x != 0], dtype=float)
    n = len(d)
    if n == 0:
        raise ValueError("all differences are zero")
    absd = np.abs(d)
    order = np.argsort(absd, kind="stable")
    ranks = np.empty(n)
    sorted_abs = absd[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    w_minus_obs = float(ranks[d < 0].sum())
    w_plus_obs = float(ranks[d > 0].sum())

    count_le_minus = 0
    count_le_plus = 0
    count_le_min = 0
    obs_min = min(w_minus_obs, w_plus_obs)
    total = 2**n
    for bits in itertools.product([0, 1], repeat=n):
        wm = sum(r for b, r in zip(bits, ranks) if b)
        wp = ranks.sum() - wm
        if wm <= w_minus_obs:
            count_le_minus += 1
        if wp <= w_plus_obs:
            count_le_plus += 1
        if min(wm, wp) <= obs_min:
            count_le_min += 1
    if alternative == "greater":  # diffs shifted positive -> small W-
        p = count_le_minus / total
    elif alternative == "less":
        p = count_le_plus / total
    else:
        p = min(1.0, count_le_min / total)
    return w_minus_obs, p


def mcnemar_chi2(b, c):
    """Continuity-corrected McNemar statistic."""
    return (abs(b - c) - 1) ** 2 / (b + c)


def fleiss_kappa_by_hand(counts):
    """Textbook two-pass computation on an items x categories count table."""
    counts = np.asarray(counts, dtype=float)
    n_items, _ = counts.shape
    n_raters = counts[0].sum()
    p_i = ((counts * counts).sum(axis=1) - n_raters) / (n_raters * (n_raters - 1))
    p_bar = p_i.mean()
    p_j = counts.sum(axis=0) / (n_items * n_raters)
    p_e = (p_j * p_j).sum()
    return (p_bar - p_e) / (1.0 - p_e)


def roc_auc_rank(scores, labels):
    """Mann-Whitney identity with half-credit for ties."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))
