"""Binary classification metrics: confusion counts, per-class rates, ROC, AUC.

Stressed (label 1) is the positive class throughout: FP is a healthy window
called stressed (type 1 error), FN a stressed window called healthy (type 2).
Zero-denominator rates come back as 0 with a degenerate flag instead of
raising, so sweeps over tiny folds survive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False


@dataclass
class EvalReport:
    """Evaluation results; fold fields populated only by cross-validation."""

    confusion: ConfusionMatrix
    accuracy: float
    stressed: ClassMetrics
    healthy: ClassMetrics
    roc: list = field(default_factory=list)   # (fpr, tpr, threshold) triples
    auc: float | None = None
    per_fold: list | None = None
    mean_accuracy: float | None = None
    std_accuracy: float | None = None
    mean_auc: float | None = None
    std_auc: float | None = None
    mean_roc: list | None = None              # (fpr, tpr) on the 101-point grid

    def to_dict(self) -> dict:
        d = {
            "confusion": {"tp": self.confusion.tp, "tn": self.confusion.tn,
                          "fp": self.confusion.fp, "fn": self.confusion.fn},
            "accuracy": self.accuracy,
            "stressed": vars(self.stressed).copy(),
            "healthy": vars(self.healthy).copy(),
            "roc": [[p[0], p[1], "inf" if math.isinf(p[2]) else p[2]] for p in self.roc],
            "auc": self.auc,
        }
        if self.per_fold is not None:
            d["per_fold"] = [fold.to_dict() for fold in self.per_fold]
            d["mean_accuracy"] = self.mean_accuracy
            d["std_accuracy"] = self.std_accuracy
            d["mean_auc"] = self.mean_auc
            d["std_auc"] = self.std_auc
            d["mean_roc"] = [list(p) for p in self.mean_roc]
        return d


def confusion_matrix(pred, truth, positive: int = 1) -> ConfusionMatrix:
    """Count TP/TN/FP/FN with the given positive class (stressed by default)."""
    pred = np.asarray(pred).astype(int)
    truth = np.asarray(truth).astype(int)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.size == 0:
        raise ValueError("cannot build a confusion matrix from no samples")
    p = pred == positive
    t = truth == positive
    return ConfusionMatrix(
        tp=int(np.sum(p & t)),
        tn=int(np.sum(~p & ~t)),
        fp=int(np.sum(p & ~t)),
        fn=int(np.sum(~p & t)),
    )


def _rate(num: int, den: int) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def _class_metrics(tp: int, fp: int, fn: int) -> ClassMetrics:
    precision, d1 = _rate(tp, tp + fp)
    recall, d2 = _rate(tp, tp + fn)
    if precision + recall == 0.0:
        f1, d3 = 0.0, True
    else:
        f1, d3 = 2.0 * precision * recall / (precision + recall), False
    return ClassMetrics(precision, recall, f1, degenerate=d1 or d2 or d3)


def classification_metrics(cm: ConfusionMatrix) -> EvalReport:
    """Accuracy plus per-class precision/recall/F1 from confusion counts.

    Healthy metrics treat TN as that class's true positives: a healthy
    false positive is a stressed window predicted healthy (the FN count).
    """
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    accuracy = (cm.tp + cm.tn) / cm.total
    stressed = _class_metrics(cm.tp, cm.fp, cm.fn)
    healthy = _class_metrics(cm.tn, cm.fn, cm.fp)
    return EvalReport(confusion=cm, accuracy=accuracy, stressed=stressed, healthy=healthy)


def roc_curve(scores, truth) -> list:
    """(FPR, TPR, threshold) triples, one per distinct score, descending.

    The curve starts at (0, 0) with threshold +inf and ends at (1, 1); tied
    scores collapse into a single point.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(int)
    if scores.shape != truth.shape or scores.ndim != 1:
        raise ValueError("scores and truth must be equal-length vectors")
    n_pos = int(np.sum(truth == 1))
    n_neg = int(np.sum(truth == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes in the truth labels")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    is_pos = truth[order] == 1
    tps = np.cumsum(is_pos)
    fps = np.cumsum(~is_pos)
    last_of_group = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    points = [(0.0, 0.0, math.inf)]
    for i in last_of_group:
        points.append((fps[i] / n_neg, tps[i] / n_pos, float(s[i])))
    return points


def auc(points) -> float:
    """Trapezoidal area under an ROC polyline."""
    area = 0.0
    for (x0, y0, *_), (x1, y1, *_) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def roc_to_csv(points, path) -> None:
    """Write fpr,tpr,threshold rows; the opening point's threshold is inf."""
    with open(path, "w", newline="") as fh:
        fh.write("fpr,tpr,threshold\n")
        for fpr, tpr, threshold in points:
            t = "inf" if math.isinf(threshold) else f"{threshold:.17g}"
            fh.write(f"{fpr:.17g},{tpr:.17g},{t}\n")


def evaluate_predictions(pred_labels, scores, truth) -> EvalReport:
    """Full single-split report: confusion, rates, ROC and AUC."""
    cm = confusion_matrix(pred_labels, truth)
    report = classification_metrics(cm)
    points = roc_curve(scores, truth)
    report.roc = points
    report.auc = auc(points)
    return report
