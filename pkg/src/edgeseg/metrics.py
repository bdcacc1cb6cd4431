"""Confusion matrices and per-class precision / recall / F1.

Rows are predicted classes and columns reference classes, so the
row-normalised diagonal is the precision.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) int64, [predicted, reference]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


@dataclass
class ClassScores:
    precision: float  # nan when undefined
    recall: float
    f1: float


def confusion(pred, ref, num_classes: int, ignore_label: int | None = 255) -> ConfusionMatrix:
    """Tally ``counts[pred, ref]`` over pixels whose reference is not ignored.

    Predicted ignore labels are excluded as well.
    """
    pred, ref = np.asarray(getattr(pred, "values", pred)), np.asarray(getattr(ref, "values", ref))
    if pred.shape != ref.shape:
        raise ValueError(f"prediction {pred.shape} and reference {ref.shape} differ in shape")
    keep = np.ones(ref.shape, bool)
    if ignore_label is not None:
        keep = (ref != ignore_label) & (pred != ignore_label)
    p, r = pred[keep].astype(np.int64), ref[keep].astype(np.int64)
    if p.size and (min(p.min(), r.min()) < 0 or max(p.max(), r.max()) >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    counts = np.bincount(p * num_classes + r, minlength=num_classes**2).reshape(num_classes, num_classes)
    return ConfusionMatrix(counts)


def f1_score(precision: float, recall: float) -> float:
    if math.isnan(precision) or math.isnan(recall):
        return math.nan
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def per_class_prf(cm: ConfusionMatrix) -> list[ClassScores]:
    c = cm.counts.astype(np.float64)
    diag = np.diag(c)
    rows, cols = c.sum(axis=1), c.sum(axis=0)
    out = []
    for k in range(cm.num_classes):
        p = diag[k] / rows[k] if rows[k] else math.nan
        r = diag[k] / cols[k] if cols[k] else math.nan
        out.append(ClassScores(p, r, f1_score(p, r)))
    return out


def overall_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def mean_f1(cm: ConfusionMatrix) -> float:
    """Macro F1 over classes where it is defined."""
    vals = [s.f1 for s in per_class_prf(cm) if not math.isnan(s.f1)]
    return float(np.mean(vals)) if vals else math.nan


def row_percentages(cm: ConfusionMatrix) -> np.ndarray:
    c = cm.counts.astype(np.float64)
    rows = c.sum(axis=1, keepdims=True)
    return np.where(rows > 0, 100 * c / np.where(rows > 0, rows, 1), np.nan)


def _pct(x: float) -> str:
    return "n/a" if math.isnan(x) else f"{100 * x:.1f}"


def report(cm: ConfusionMatrix, class_names=None) -> str:
    """Row-normalised percentage table with precision/recall/F1 footer rows."""
    names = list(class_names or [f"class{k}" for k in range(cm.num_classes)])
    width = max(9, *(len(n) for n in names)) + 1
    pct = row_percentages(cm)
    head = "pred \\ ref".ljust(width) + "".join(n.rjust(width) for n in names)
    lines = [head]
    for k, name in enumerate(names):
        cells = ["n/a" if math.isnan(v) else f"{v:.1f}" for v in pct[k]]
        lines.append(name.ljust(width) + "".join(c.rjust(width) for c in cells))
    scores = per_class_prf(cm)
    lines.append("-" * len(head))
    for label, attr in (("Precision", "precision"), ("Recall", "recall"), ("F1", "f1")):
        lines.append(label.ljust(width) + "".join(_pct(getattr(s, attr)).rjust(width) for s in scores))
    lines.append(f"OA {100 * overall_accuracy(cm):.1f}%" if cm.total else "OA n/a")
    return "\n".join(lines) + "\n"


def report_csv(cm: ConfusionMatrix, class_names=None) -> str:
    names = list(class_names or [f"class{k}" for k in range(cm.num_classes)])
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["class", "precision", "recall", "f1", *[f"count_ref_{n}" for n in names]])
    for name, s, row in zip(names, per_class_prf(cm), cm.counts):
        wr.writerow([name, *("n/a" if math.isnan(v) else f"{v:.6f}" for v in (s.precision, s.recall, s.f1)), *row])
    wr.writerow(["overall_accuracy", f"{overall_accuracy(cm):.6f}" if cm.total else "n/a"])
    return buf.getvalue()


def check_thresholds(cm: ConfusionMatrix, min_oa: float | None = None, min_f1: dict[int, float] | None = None) -> list[str]:
    """Return a message for each threshold that is not met (empty when all pass)."""
    failures = []
    if min_oa is not None:
        oa = overall_accuracy(cm)
        if oa < min_oa:
            failures.append(f"OA {oa:.4f} < {min_oa:.4f}")
    scores = per_class_prf(cm)
    for k, thr in (min_f1 or {}).items():
        f = scores[k].f1
        if math.isnan(f) or f < thr:
            failures.append(f"class {k} F1 {f:.4f} < {thr:.4f}")
    return failures
