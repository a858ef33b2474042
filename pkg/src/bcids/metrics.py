"""Confusion matrices and the one-vs-rest macro metrics used in the reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .traffic import N_CLASSES, ClassId


class EmptyMatrix(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """``counts[t, p]`` = number of samples of true class t predicted as p."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.array(self.counts, dtype=np.int64)
        if c.shape != (N_CLASSES, N_CLASSES):
            raise ValueError(f"confusion matrix must be {N_CLASSES}x{N_CLASSES}")
        if (c < 0).any():
            raise ValueError("counts must be non-negative")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def one_vs_rest(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Per-class (TP, FP, FN, TN) integer arrays."""
        c = self.counts
        tp = np.diag(c).copy()
        fp = c.sum(axis=0) - tp
        fn = c.sum(axis=1) - tp
        tn = self.total - tp - fp - fn
        return tp, fp, fn, tn

    def to_json(self) -> list[list[int]]:
        return self.counts.tolist()


def accumulate(pairs: Iterable[tuple[int, int]]) -> ConfusionMatrix:
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for t, p in pairs:
        counts[int(t), int(p)] += 1
    return ConfusionMatrix(counts)


def from_arrays(y_true: np.ndarray, y_pred: np.ndarray) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    accuracy_plain: float
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    precision_macro: float
    recall_macro: float
    undefined_precision: tuple[bool, ...]
    undefined_recall: tuple[bool, ...]

    def to_json(self) -> dict:
        return {
            "accuracy_eq12": self.accuracy,
            "accuracy_plain": self.accuracy_plain,
            "precision": list(self.precision),
            "recall": list(self.recall),
            "precision_macro": self.precision_macro,
            "recall_macro": self.recall_macro,
            "undefined_precision": list(self.undefined_precision),
            "undefined_recall": list(self.undefined_recall),
        }


def _safe_div(num: int, den: int) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def metrics(cm: ConfusionMatrix) -> Metrics:
    """Macro one-vs-rest accuracy, plain accuracy, per-class and macro precision/recall.

    ``accuracy`` averages ``(TP+TN)/(TP+TN+FP+FN)`` over the classes. Ratios with a
    zero denominator are reported as 0 and flagged.
    """
    total = cm.total
    if total == 0:
        raise EmptyMatrix("no samples in confusion matrix")
    tp, fp, fn, tn = (a.tolist() for a in cm.one_vs_rest())
    T = N_CLASSES
    terms = [(tp[t] + tn[t]) / (tp[t] + tn[t] + fp[t] + fn[t]) for t in range(T)]
    prec = [_safe_div(tp[t], tp[t] + fp[t]) for t in range(T)]
    rec = [_safe_div(tp[t], tp[t] + fn[t]) for t in range(T)]
    return Metrics(
        accuracy=sum(terms) / T,
        accuracy_plain=sum(tp) / total,
        precision=tuple(p for p, _ in prec),
        recall=tuple(r for r, _ in rec),
        precision_macro=sum(p for p, _ in prec) / T,
        recall_macro=sum(r for r, _ in rec) / T,
        undefined_precision=tuple(u for _, u in prec),
        undefined_recall=tuple(u for _, u in rec),
    )


REPORT_COLUMNS = (
    ("model", "accuracy_eq12", "accuracy_plain", "precision_macro", "recall_macro")
    + tuple(f"precision_{c.name.lower()}" for c in ClassId)
    + tuple(f"recall_{c.name.lower()}" for c in ClassId)
)


@dataclass(frozen=True)
class Report:
    rows: tuple[tuple[str, Metrics], ...]

    def row(self, name: str) -> Metrics:
        for n, m in self.rows:
            if n == name:
                return m
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for name, m in self.rows:
            w.writerow([name] + [repr(x) for x in (m.accuracy, m.accuracy_plain, m.precision_macro,
                                                   m.recall_macro, *m.precision, *m.recall)])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(12, max(len(n) for n, _ in self.rows))
        head = f"{'model':<{width}}  {'Accuracy':>9}  {'(plain)':>9}  {'Precision':>9}  {'Recall':>9}"
        lines = [head, "-" * len(head)]
        for name, m in self.rows:
            lines.append(f"{name:<{width}}  {100 * m.accuracy:9.3f}  {100 * m.accuracy_plain:9.3f}"
                         f"  {100 * m.precision_macro:9.3f}  {100 * m.recall_macro:9.3f}")
        return "\n".join(lines) + "\n"


def compare_report(results: Sequence[tuple[str, ConfusionMatrix]]) -> Report:
    """One metrics row per named confusion matrix, in the given order."""
    if not results:
        raise ValueError("compare_report needs at least one result")
    return Report(tuple((name, metrics(cm)) for name, cm in results))
