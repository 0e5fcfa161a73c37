import json

import numpy as np
import pytest
import scipy.special
import scipy.stats

from aquascan.evaluation import (
    CalibrationReport,
    ece,
    field_rates,
    fleiss_kappa,
    map50,
    mcnemar,
    roc_auc,
    temperature_scale,
    wilcoxon_signed_rank,
    write_metrics_report,
)

from oracles import (
    exhaustive_average_precision,
    fleiss_kappa_by_hand,
    mcnemar_chi2,
    roc_auc_rank,
    wilcoxon_exact_enumeration,
)


def one_image(pred_boxes, scores, classes, gt_boxes, gt_classes):
    preds = {
        "boxes": np.asarray(pred_boxes, dtype=float).reshape(-1, 4),
        "scores": np.asarray(scores, dtype=float),
        "classes": np.asarray(classes, dtype=int),
    }
    gts = {
        "boxes": np.asarray(gt_boxes, dtype=float).reshape(-1, 4),
        "classes": np.asarray(gt_classes, dtype=int),
    }
    return [preds], [gts]


class TestMap50:
    def test_single_perfect_detection(self):
        preds, gts = one_image([[10, 10, 50, 50]], [0.9], [0], [[10, 10, 50, 50]], [0])
        report = map50(preds, gts, n_classes=1)
        assert report.per_class_ap[0] == 1.0
        assert report.mean_ap == 1.0

    def test_high_scoring_false_positive_halves_ap(self):
        # the FP outranks the TP, so precision at full recall is 1/2
        preds, gts = one_image(
            [[100, 100, 120, 120], [10, 10, 50, 50]],
            [0.95, 0.9],
            [0, 0],
            [[10, 10, 50, 50]],
            [0],
        )
        report = map50(preds, gts, n_classes=1)
        assert report.per_class_ap[0] == pytest.approx(0.5)

    def test_low_scoring_false_positive_keeps_ap_at_one(self):
        preds, gts = one_image(
            [[10, 10, 50, 50], [100, 100, 120, 120]],
            [0.9, 0.1],
            [0, 0],
            [[10, 10, 50, 50]],
            [0],
        )
        report = map50(preds, gts, n_classes=1)
        assert report.per_class_ap[0] == 1.0

    def test_duplicate_detection_is_a_false_positive(self):
        # the second hit on an already-matched gt must not count again
        preds, gts = one_image(
            [[10, 10, 50, 50], [11, 11, 50, 50]],
            [0.9, 0.8],
            [0, 0],
            [[10, 10, 50, 50]],
            [0],
        )
        report = map50(preds, gts, n_classes=1)
        assert report.per_class_ap[0] == 1.0  # recall saturates before the dup

    def test_iou_below_threshold_never_matches(self):
        preds, gts = one_image([[0, 0, 10, 10]], [0.9], [0], [[20, 20, 30, 30]], [0])
        report = map50(preds, gts, n_classes=1)
        assert report.per_class_ap[0] == 0.0

    def test_classes_without_gt_are_skipped_with_warning(self):
        preds, gts = one_image(
            [[10, 10, 50, 50], [10, 10, 50, 50]],
            [0.9, 0.8],
            [0, 3],
            [[10, 10, 50, 50]],
            [0],
        )
        with pytest.warns(UserWarning, match="no ground truth"):
            report = map50(preds, gts, n_classes=8)
        assert report.skipped_classes == [3]
        assert 3 not in report.per_class_ap
        assert report.mean_ap == 1.0

    def test_mean_over_classes(self):
        preds, gts = one_image(
            [[10, 10, 50, 50], [200, 200, 230, 230]],
            [0.9, 0.9],
            [0, 1],
            [[10, 10, 50, 50], [100, 100, 130, 130]],
            [0, 1],
        )
        report = map50(preds, gts, n_classes=2)
        assert report.per_class_ap[0] == 1.0
        assert report.per_class_ap[1] == 0.0
        assert report.mean_ap == pytest.approx(0.5)

    def test_matching_confined_to_same_image(self):
        # a perfect box in image 0 cannot claim the gt living in image 1
        preds = [
            {"boxes": np.array([[10.0, 10, 50, 50]]), "scores": np.array([0.9]),
             "classes": np.array([0])},
            {"boxes": np.zeros((0, 4)), "scores": np.array([]), "classes": np.array([])},
        ]
        gts = [
            {"boxes": np.zeros((0, 4)), "classes": np.array([])},
            {"boxes": np.array([[10.0, 10, 50, 50]]), "classes": np.array([0])},
        ]
        report = map50(preds, gts, n_classes=1)
        assert report.per_class_ap[0] == 0.0

    def test_greedy_prefers_higher_iou_gt(self):
        # one pred overlapping two gts must take the better one
        preds, gts = one_image(
            [[0, 0, 40, 40]],
            [0.9],
            [0],
            [[0, 0, 40, 40], [0, 0, 44, 44]],
            [0, 0],
        )
        report = map50(preds, gts, n_classes=1)
        # recall tops out at 1/2 with a single prediction
        assert report.per_class_ap[0] == pytest.approx(0.5)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_exhaustive_assignment_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n_pred = int(rng.integers(1, 7))
        n_gt = int(rng.integers(1, 5))
        boxes = []
        for _ in range(n_pred):
            x, y = rng.uniform(0, 60, size=2)
            w, h = rng.uniform(10, 40, size=2)
            boxes.append([x, y, x + w, y + h])
        gt_boxes = []
        for _ in range(n_gt):
            x, y = rng.uniform(0, 60, size=2)
            w, h = rng.uniform(10, 40, size=2)
            gt_boxes.append([x, y, x + w, y + h])
        # coarse scores force duplicate-score orderings through the tie rule
        scores = np.round(rng.uniform(0.1, 1.0, size=n_pred), 1)
        preds, gts = one_image(boxes, scores, [0] * n_pred, gt_boxes, [0] * n_gt)
        report = map50(preds, gts, n_classes=1)
        expected = exhaustive_average_precision(
            list(zip(scores.tolist(), boxes)), gt_boxes
        )
        assert report.per_class_ap[0] == pytest.approx(expected, abs=1e-12)

    def test_report_serializes_to_json(self):
        preds, gts = one_image([[10, 10, 50, 50]], [0.9], [0], [[10, 10, 50, 50]], [0])
        report = map50(preds, gts, n_classes=1)
        blob = json.dumps(report.to_dict())
        assert "mAP" in blob


class TestRocAuc:
    def test_textbook_example(self):
        assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)

    def test_perfect_and_inverted(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_ties_get_half_credit(self):
        assert roc_auc([0.5, 0.5], [0, 1]) == pytest.approx(0.5)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_pairwise_counting_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 40))
        scores = np.round(rng.uniform(size=n), 1)  # heavy ties
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        assert roc_auc(scores, labels) == pytest.approx(
            roc_auc_rank(scores, labels), abs=1e-12
        )

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            roc_auc([0.1, 0.9], [1, 1])


class TestEce:
    def test_two_point_hand_computation(self):
        report = ece([0.02, 0.98], [0, 1])
        assert report.ece == pytest.approx(0.02)
        assert report.bin_counts.sum() == 2

    def test_score_of_one_lands_in_last_bin(self):
        report = ece([1.0], [1])
        assert report.bin_counts[-1] == 1

    def test_calibrated_scores_have_low_ece(self):
        rng = np.random.default_rng(0)
        scores = rng.uniform(size=4000)
        labels = (rng.uniform(size=4000) < scores).astype(int)
        assert ece(scores, labels).ece < 0.05

    def test_overconfident_scores_have_high_ece(self):
        rng = np.random.default_rng(1)
        p = rng.uniform(0.3, 0.7, size=4000)
        labels = (rng.uniform(size=4000) < p).astype(int)
        overconfident = np.where(p > 0.5, 0.99, 0.01)
        assert ece(overconfident, labels).ece > 0.2

    def test_rejects_out_of_range_scores(self):
        with pytest.raises(ValueError):
            ece([1.2], [1])

    def test_report_round_trips_through_json(self):
        report = ece([0.1, 0.9], [0, 1])
        again = json.loads(json.dumps(report.to_dict()))
        assert again["ece"] == pytest.approx(report.ece)
        assert isinstance(report, CalibrationReport)


class TestTemperatureScale:
    def test_recovers_planted_temperature(self):
        rng = np.random.default_rng(7)
        z = rng.normal(0, 2, size=6000)
        labels = (rng.uniform(size=6000) < 1 / (1 + np.exp(-z))).astype(float)
        t = temperature_scale(3.0 * z, labels)
        assert t == pytest.approx(3.0, abs=0.25)

    def test_scaling_never_hurts_nll(self):
        rng = np.random.default_rng(8)
        z = rng.normal(0, 1, size=500)
        labels = (rng.uniform(size=500) < 1 / (1 + np.exp(-z))).astype(float)
        logits = 5.0 * z

        def nll(t):
            s = logits / t
            return np.mean(np.logaddexp(0, s) - s * labels)

        t = temperature_scale(logits, labels)
        assert nll(t) <= nll(1.0) + 1e-12

    def test_improves_ece_of_overconfident_model(self):
        rng = np.random.default_rng(9)
        z = rng.normal(0, 1.5, size=4000)
        labels = (rng.uniform(size=4000) < 1 / (1 + np.exp(-z))).astype(float)
        logits = 4.0 * z
        t = temperature_scale(logits, labels)
        before = ece(1 / (1 + np.exp(-logits)), labels).ece
        after = ece(1 / (1 + np.exp(-logits / t)), labels).ece
        assert after < before

    def test_single_class_labels_rejected(self):
        with pytest.raises(ValueError):
            temperature_scale([0.5, 1.0, -0.2], [1, 1, 1])


class TestMcnemar:
    def test_large_sample_chi_square(self):
        a = np.zeros(100, dtype=bool)
        b = np.zeros(100, dtype=bool)
        a[:20] = True   # A right, B wrong on 20
        b[20:25] = True  # B right, A wrong on 5
        stat, p = mcnemar(a, b)
        assert stat == pytest.approx(mcnemar_chi2(20, 5))
        assert stat == pytest.approx(196 / 25)
        assert p == pytest.approx(float(scipy.stats.chi2.sf(196 / 25, 1)))

    def test_small_sample_uses_exact_binomial(self):
        a = np.zeros(40, dtype=bool)
        b = np.zeros(40, dtype=bool)
        a[:15] = True
        b[15:20] = True  # b=15, c=5, n=20 < 25
        _, p = mcnemar(a, b)
        expected = 2 * sum(
            scipy.special.comb(20, k) * 0.5**20 for k in range(6)
        )
        assert p == pytest.approx(expected)

    def test_equal_disagreements_give_p_near_one(self):
        a = np.array([True] * 5 + [False] * 5 + [True] * 10)
        b = np.array([False] * 5 + [True] * 5 + [True] * 10)
        _, p = mcnemar(a, b)
        assert p == 1.0

    def test_no_discordant_pairs_is_an_error(self):
        a = np.array([True, False, True])
        with pytest.raises(ValueError):
            mcnemar(a, a.copy())

    def test_symmetric_in_argument_order(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(size=60) < 0.7
        b = rng.uniform(size=60) < 0.6
        sa, pa = mcnemar(a, b)
        sb, pb = mcnemar(b, a)
        assert sa == sb and pa == pb


class TestWilcoxon:
    @pytest.mark.parametrize("seed", range(12))
    def test_exact_regime_matches_sign_pattern_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 13))
        # quantized differences produce ties and occasional zeros
        d = np.round(rng.normal(0.3, 1.0, size=n), 1)
        if np.all(d == 0):
            d[0] = 0.5
        for alt in ("two-sided", "greater", "less"):
            w, p = wilcoxon_signed_rank(d, alternative=alt)
            w_ref, p_ref = wilcoxon_exact_enumeration(d, alternative=alt)
            assert w == pytest.approx(w_ref)
            assert p == pytest.approx(p_ref, abs=1e-12)

    def test_zeros_are_dropped(self):
        w_with, p_with = wilcoxon_signed_rank([0.0, 1.0, -2.0, 0.0, 3.0])
        w_without, p_without = wilcoxon_signed_rank([1.0, -2.0, 3.0])
        assert w_with == w_without and p_with == p_without

    def test_all_zero_differences_rejected(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([0.0, 0.0])

    @pytest.mark.parametrize("seed", range(5))
    def test_large_sample_tracks_scipy(self, seed):
        rng = np.random.default_rng(100 + seed)
        d = rng.normal(0.4, 1.0, size=40)
        d = d[d != 0]
        _, p = wilcoxon_signed_rank(d)
        ref = scipy.stats.wilcoxon(d, correction=True, method="approx")
        assert p == pytest.approx(ref.pvalue, rel=1e-9)

    def test_strong_positive_shift_is_significant(self):
        d = np.arange(1, 11, dtype=float)  # all positive
        _, p = wilcoxon_signed_rank(d, alternative="greater")
        assert p == pytest.approx(1 / 1024)


class TestFleissKappa:
    def test_perfect_agreement(self):
        counts = np.array([[3, 0], [0, 3], [3, 0]])
        assert fleiss_kappa(counts) == 1.0

    def test_two_item_hand_example(self):
        counts = np.array([[2, 0], [0, 2]])
        assert fleiss_kappa(counts) == pytest.approx(1.0)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_textbook_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n_items, n_cats, n_raters = 12, 4, 5
        counts = np.zeros((n_items, n_cats))
        for i in range(n_items):
            votes = rng.integers(0, n_cats, size=n_raters)
            for v in votes:
                counts[i, v] += 1
        assert fleiss_kappa(counts) == pytest.approx(
            fleiss_kappa_by_hand(counts), abs=1e-12
        )

    def test_unbalanced_rater_counts_rejected(self):
        with pytest.raises(ValueError):
            fleiss_kappa([[2, 1], [2, 0]])


class TestFieldRates:
    def test_confirmed_and_missed_accounting(self):
        day = 24 * 3600.0
        events = [(10 * day, 10.5 * day), (20 * day, 20.2 * day)]
        alerts = [10.2 * day, 15 * day, 19.5 * day]  # middle one is spurious
        rates = field_rates(alerts, events)
        assert rates.fpr == pytest.approx(1 / 3)
        assert rates.fnr == 0.0
        assert rates.confirmed_alerts == 2
        assert rates.detected_events == 2

    def test_window_boundary_is_inclusive(self):
        rates = field_rates([0.0], [(24 * 3600.0, 24 * 3600.0 + 10)])
        assert rates.fpr == 0.0

    def test_just_outside_window_does_not_confirm(self):
        rates = field_rates([0.0], [(24 * 3600.0 + 1.0, 24 * 3600.0 + 10)])
        assert rates.fpr == 1.0
        assert rates.fnr == 1.0

    def test_zero_denominators_reported_as_none(self):
        rates = field_rates([], [(0.0, 10.0)])
        assert rates.fpr is None
        assert rates.fnr == 1.0
        rates = field_rates([5.0], [])
        assert rates.fnr is None
        assert rates.fpr == 1.0

    def test_empty_event_interval_rejected(self):
        with pytest.raises(ValueError):
            field_rates([0.0], [(10.0, 10.0)])

    def test_one_alert_can_confirm_two_events(self):
        rates = field_rates([100.0], [(50.0, 60.0), (150.0, 160.0)],
                            matching_window=100.0)
        assert rates.fnr == 0.0
        assert rates.fpr == 0.0


class TestMetricsReport:
    def test_write_and_reload(self, tmp_path):
        path = tmp_path / "out" / "metrics.json"
        write_metrics_report(path, {"mAP": 0.5, "auc": 0.9})
        data = json.loads(path.read_text())
        assert data == {"mAP": 0.5, "auc": 0.9}

    def test_output_is_deterministic(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        write_metrics_report(a, {"z": 1, "a": 2})
        write_metrics_report(b, {"a": 2, "z": 1})
        assert a.read_bytes() == b.read_bytes()
