"""Confusion-matrix metrics and deterministic data splitting.

F1, specificity and sensitivity are computed one-vs-rest per class and
macro-averaged (unweighted class mean); 0/0 cells are defined as 0.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .errors import DomainError, ShapeMismatchError
from .numeric import RngStream


@dataclasses.dataclass
class ConfusionCounts:
    """One-vs-rest integer counts per class; tp+fp+fn+tn = total for each."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.tp.shape[0]

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0]) if self.n_classes else 0


@dataclasses.dataclass
class MetricsReport:
    accuracy: float
    sensitivity: np.ndarray
    specificity: np.ndarray
    f1: np.ndarray
    macro_sensitivity: float
    macro_specificity: float
    macro_f1: float
    averaging: str = "macro"

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "averaging": self.averaging,
            "macro_f1": self.macro_f1,
            "macro_sensitivity": self.macro_sensitivity,
            "macro_specificity": self.macro_specificity,
            "per_class": {
                "f1": [float(x) for x in self.f1],
                "sensitivity": [float(x) for x in self.sensitivity],
                "specificity": [float(x) for x in self.specificity],
            },
        }


def confusion_counts(true_labels, predicted_labels, n_classes: int) -> ConfusionCounts:
    """Exact one-vs-rest counts; labels must lie in [0, n_classes)."""
    t = np.asarray(true_labels, dtype=int)
    p = np.asarray(predicted_labels, dtype=int)
    if t.shape != p.shape or t.ndim != 1:
        raise ShapeMismatchError(f"label vectors must match, got {t.shape} and {p.shape}")
    if n_classes < 1:
        raise DomainError(f"n_classes must be positive, got {n_classes}")
    for name, v in (("true", t), ("predicted", p)):
        if v.size and (v.min() < 0 or v.max() >= n_classes):
            raise DomainError(f"{name} labels fall outside [0, {n_classes})")
    n = t.shape[0]
    tp = np.zeros(n_classes, dtype=np.int64)
    fp = np.zeros(n_classes, dtype=np.int64)
    fn = np.zeros(n_classes, dtype=np.int64)
    for c in range(n_classes):
        tp[c] = np.count_nonzero((t == c) & (p == c))
        fp[c] = np.count_nonzero((t != c) & (p == c))
        fn[c] = np.count_nonzero((t == c) & (p != c))
    tn = n - tp - fp - fn
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape[0], dtype=float)
    mask = den > 0
    out[mask] = num[mask] / den[mask]
    return out


def metrics_report(counts: ConfusionCounts) -> MetricsReport:
    """Accuracy plus per-class and macro F1/specificity/sensitivity."""
    total = counts.total
    accuracy = float(counts.tp.sum() / total) if total else 0.0
    sensitivity = _safe_div(counts.tp, counts.tp + counts.fn)
    specificity = _safe_div(counts.tn, counts.tn + counts.fp)
    f1 = _safe_div(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn)
    return MetricsReport(
        accuracy=accuracy,
        sensitivity=sensitivity,
        specificity=specificity,
        f1=f1,
        macro_sensitivity=float(sensitivity.mean()),
        macro_specificity=float(specificity.mean()),
        macro_f1=float(f1.mean()),
    )


def evaluate(true_labels, predicted_labels, n_classes: int) -> MetricsReport:
    return metrics_report(confusion_counts(true_labels, predicted_labels, n_classes))


def stratified_kfold(labels, k: int, seed: RngStream) -> list[np.ndarray]:
    """k disjoint index folds with per-class sizes differing by at most 1.

    Indices are shuffled per class with the seeded generator, then dealt
    round-robin, so the folds are deterministic for a fixed seed.
    """
    y = np.asarray(labels)
    if y.ndim != 1 or y.size == 0:
        raise ShapeMismatchError("labels must be a non-empty 1-D sequence")
    if k < 2:
        raise DomainError(f"k must be at least 2, got {k}")
    gen = seed.generator()
    folds: list[list[int]] = [[] for _ in range(k)]
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        if idx.size < k:
            raise DomainError(
                f"class {cls!r} has only {idx.size} members, fewer than k={k}")
        idx = idx[gen.permutation(idx.size)]
        for pos, sample in enumerate(idx):
            folds[pos % k].append(int(sample))
    return [np.sort(np.array(f, dtype=int)) for f in folds]


def holdout_split(labels, train_fraction: float, seed: RngStream
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Stratified train/test split (e.g. 0.8 for an 80/20 hold-out)."""
    y = np.asarray(labels)
    if y.ndim != 1 or y.size == 0:
        raise ShapeMismatchError("labels must be a non-empty 1-D sequence")
    if not 0.0 < train_fraction < 1.0:
        raise DomainError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    gen = seed.generator()
    train: list[int] = []
    test: list[int] = []
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        idx = idx[gen.permutation(idx.size)]
        n_train = int(round(train_fraction * idx.size))
        if idx.size >= 2:
            n_train = min(max(n_train, 1), idx.size - 1)
        train.extend(int(i) for i in idx[:n_train])
        test.extend(int(i) for i in idx[n_train:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(test, dtype=int))


def write_metrics_json(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
