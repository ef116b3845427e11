"""Tests for confusion matrix analysis."""

import numpy as np
import pytest

from cgforge.confusion_matrix import (
    PR_GRID_POINTS,
    MetricsReport,
    compute_aict,
    compute_metrics,
    confusion_counts,
    pr_curve,
    threshold_for_recall,
)
from cgforge.errors import DataError


class TestMetricsReport:
    def test_all_correct(self):
        r = MetricsReport(0.5, true_positives=10, true_negatives=30)
        assert r.precision == 1.0
        assert r.recall == 1.0
        assert r.f1 == 1.0
        assert r.total == 40

    def test_mixed(self):
        r = MetricsReport(0.5, true_positives=8, false_positives=2, false_negatives=8)
        assert r.precision == pytest.approx(0.8)
        assert r.recall == pytest.approx(0.5)
        assert r.f1 == pytest.approx(2 * 0.8 * 0.5 / 1.3)

    def test_empty_denominators(self):
        r = MetricsReport(0.5)
        assert r.precision == 0.0
        assert r.recall == 0.0
        assert r.f1 == 0.0

    def test_to_dict(self):
        d = MetricsReport(0.5, true_positives=1, false_negatives=1, aict=2.0, callsites=1, candidates=4).to_dict()
        assert d["tp"] == 1
        assert d["recall"] == 0.5
        assert d["aict"] == 2.0

    def test_format_report_runs(self):
        r = MetricsReport(0.5, true_positives=80, false_negatives=20, aict=3.5, callsites=10, candidates=40)
        report = r.format_report()
        assert "80" in report
        assert "80.0%" in report
        assert "AICT" in report

    def test_format_report_without_aict(self):
        assert "AICT" not in MetricsReport(0.5, true_positives=1).format_report()


class TestConfusionCounts:
    def test_strict_threshold(self):
        # a score equal to the threshold is not a match
        assert confusion_counts([0.1, 0.5, 0.9, 0.2], [1, 1, 0, 0], 0.5) == (1, 1, 1, 1)

    def test_nine_of_ten(self):
        r = MetricsReport(0.5, *confusion_counts([0.1] * 9 + [0.9] + [0.1] + [0.9] * 9, [1] * 10 + [0] * 10, 0.5))
        assert (r.true_positives, r.false_negatives, r.false_positives, r.true_negatives) == (9, 1, 1, 9)
        assert r.precision == pytest.approx(0.9)
        assert r.recall == pytest.approx(0.9)
        assert r.f1 == pytest.approx(0.9)

    def test_zero_scores_match_everything(self):
        r = compute_metrics([0.0, 0.0, 0.0], [1, 0, 1], 0.5)
        assert r.recall == 1.0
        assert r.true_negatives == 0

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            confusion_counts([0.1], [1, 0], 0.5)

    def test_compute_metrics(self):
        r = compute_metrics([0.1, 0.9], [1, 0], 0.5)
        assert (r.true_positives, r.true_negatives) == (1, 1)
        assert len(r.pr_curve) == PR_GRID_POINTS


class TestPrCurve:
    def test_recall_monotone_in_threshold(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            scores = rng.random(50)
            labels = rng.integers(0, 2, 50)
            recalls = [r for _, _, r in pr_curve(scores, labels)]
            assert recalls == sorted(recalls)

    def test_endpoints(self):
        curve = pr_curve([0.2, 0.7], [1, 0])
        assert curve[0] == (0.0, 0.0, 0.0)
        assert curve[-1][2] == 1.0


class TestAict:
    def test_mean_targets(self):
        assert compute_aict({"a": [0.1, 0.2, 0.3], "b": [0.1] * 5}, 0.5) == 4.0

    def test_zero_threshold(self):
        assert compute_aict({"a": [0.0, 0.3]}, 0.0) == 0.0

    def test_no_callsites(self):
        assert compute_aict({}, 0.5) is None

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(0)
        preds = {i: rng.random(20) for i in range(10)}
        values = [compute_aict(preds, tau) for tau in np.linspace(0, 1, 21)]
        assert values == sorted(values)


class TestThresholdForRecall:
    def test_smallest_threshold(self):
        tau = threshold_for_recall([0.1, 0.3, 0.8], [1, 1, 0], 1.0)
        assert tau == pytest.approx(0.31)

    def test_unreachable_target(self):
        # the positive at d=1.0 is never below any grid threshold
        assert threshold_for_recall([1.0], [1], 1.0) == 1.0

    def test_no_positives(self):
        with pytest.raises(DataError):
            threshold_for_recall([0.1], [0], 0.9)
