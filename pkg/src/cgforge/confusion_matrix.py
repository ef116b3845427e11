"""
Confusion matrix analysis for scored callsite/callee pairs.

A pair is predicted to match when its difference score d is below the
threshold. Against labels y (1 = real callee, 0 = not):

- TP: d < tau and y = 1
- FP: d < tau and y = 0
- FN: d >= tau and y = 1
- TN: d >= tau and y = 0

Precision, recall and F1 are 0.0 when their denominator is zero. The PR
curve sweeps tau over an evenly spaced grid on [0, 1]. AICT is the mean
number of predicted targets per indirect callsite, over the
address-taken candidate set.
"""

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

PR_GRID_POINTS = 101


@dataclass
class MetricsReport:
    """Results of confusion matrix analysis at one threshold."""
    threshold: float
    true_positives: int = 0
    false_positives: int = 0
    false_negatives: int = 0
    true_negatives: int = 0
    # (threshold, precision, recall) per grid point
    pr_curve: list[tuple[float, float, float]] = field(default_factory=list)
    aict: float | None = None
    callsites: int = 0
    candidates: int = 0
    # pairs left out because a slice kept no instructions
    skipped: int = 0

    @property
    def precision(self) -> float:
        total = self.true_positives + self.false_positives
        return self.true_positives / total if total > 0 else 0.0

    @property
    def recall(self) -> float:
        total = self.true_positives + self.false_negatives
        return self.true_positives / total if total > 0 else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    @property
    def total(self) -> int:
        return self.true_positives + self.false_positives + self.false_negatives + self.true_negatives

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "tp": self.true_positives,
            "fp": self.false_positives,
            "fn": self.false_negatives,
            "tn": self.true_negatives,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "aict": self.aict,
            "callsites": self.callsites,
            "candidates": self.candidates,
            "skipped": self.skipped,
            "pr_curve": [list(p) for p in self.pr_curve],
        }

    def format_report(self, title: str = "CALLSITE/CALLEE MATCHING") -> str:
        """Format a human-readable report."""
        lines = []
        lines.append("=" * 60)
        lines.append(title)
        lines.append("=" * 60)
        lines.append("")
        lines.append(f"Pairs scored:    {self.total}")
        if self.skipped:
            lines.append(f"Pairs skipped:   {self.skipped} (empty slice)")
        lines.append(f"Threshold (tau): {self.threshold:g}")
        lines.append("")
        lines.append("--- Classification ---")
        lines.append(f"True Positives:  {self.true_positives}")
        lines.append(f"False Positives: {self.false_positives}")
        lines.append(f"False Negatives: {self.false_negatives}")
        lines.append(f"True Negatives:  {self.true_negatives}")
        lines.append("")
        lines.append("--- Metrics ---")
        lines.append(f"Precision: {self.precision:.1%}")
        lines.append(f"Recall:    {self.recall:.1%}")
        lines.append(f"F1:        {self.f1:.1%}")
        lines.append("")

        if self.aict is not None:
            lines.append("--- Indirect call targets ---")
            lines.append(f"Indirect callsites:       {self.callsites}")
            lines.append(f"Address-taken candidates: {self.candidates}")
            lines.append(f"AICT:                     {self.aict:.2f}")
            lines.append("")

        if self.pr_curve:
            lines.append("--- PR curve (every 10th threshold) ---")
            for tau, p, r in self.pr_curve[::10]:
                lines.append(f"  tau={tau:.2f}  precision={p:.3f}  recall={r:.3f}")
            lines.append("")

        lines.append("=" * 60)
        return "\n".join(lines)


def threshold_grid(points: int = PR_GRID_POINTS) -> np.ndarray:
    return np.linspace(0.0, 1.0, points)


def confusion_counts(scores: Sequence[float], labels: Sequence[int], threshold: float) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) at `threshold`."""
    d = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if d.shape != y.shape:
        raise DataError(f"{d.size} scores but {y.size} labels")
    predicted = d < threshold
    tp = int(np.sum(predicted & y))
    fp = int(np.sum(predicted & ~y))
    fn = int(np.sum(~predicted & y))
    tn = int(np.sum(~predicted & ~y))
    return tp, fp, fn, tn


def pr_curve(scores: Sequence[float], labels: Sequence[int], points: int = PR_GRID_POINTS) -> list[tuple[float, float, float]]:
    curve = []
    for tau in threshold_grid(points):
        report = MetricsReport(float(tau), *confusion_counts(scores, labels, float(tau)))
        curve.append((float(tau), report.precision, report.recall))
    return curve


def compute_metrics(
    scores: Sequence[float],
    labels: Sequence[int],
    threshold: float,
    points: int = PR_GRID_POINTS,
) -> MetricsReport:
    """Confusion counts at `threshold` plus the PR curve."""
    report = MetricsReport(threshold, *confusion_counts(scores, labels, threshold))
    report.pr_curve = pr_curve(scores, labels, points)
    return report


def compute_aict(predictions: Mapping[object, Sequence[float]], threshold: float) -> float | None:
    """
    Mean number of candidates with d < threshold per callsite.

    `predictions` maps each indirect callsite to the scores of all its
    candidates. Returns None when there are no callsites.

    Examples:
        >>> compute_aict({"a": [0.1, 0.2, 0.3], "b": [0.1] * 5}, 0.5)
        4.0
    """
    if not predictions:
        return None
    counts = [int(np.sum(np.asarray(d, dtype=np.float64) < threshold)) for d in predictions.values()]
    return float(np.mean(counts))


def threshold_for_recall(
    scores: Sequence[float],
    labels: Sequence[int],
    target: float,
    points: int = PR_GRID_POINTS,
) -> float:
    """
    Smallest grid threshold whose recall reaches `target`.

    Raises:
        DataError: if there are no positive labels
    """
    y = np.asarray(labels).astype(bool)
    if not y.any():
        raise DataError("cannot pick a threshold for recall without positive pairs")
    for tau, _, recall in pr_curve(scores, labels, points):
        if recall >= target:
            return tau
    return 1.0
