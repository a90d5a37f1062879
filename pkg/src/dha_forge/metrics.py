"""Confusion matrices and precision / recall / F1 / accuracy reports.

Per-class ratios are computed in exact rational arithmetic and rounded to
float once at the end, so every figure is the correctly rounded value of
its definition.  Undefined ratios (zero denominators) are reported as 0
and flagged.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .labels import LABEL_ORDER, N_CLASSES, NarrativeLabel


class ShapeError(ValueError):
    pass


def _as_index(label) -> int:
    if isinstance(label, NarrativeLabel):
        return label.index
    if isinstance(label, str):
        return NarrativeLabel(label).index
    idx = int(label)
    if not 0 <= idx < N_CLASSES:
        raise ValueError(f"class index {idx} out of range")
    return idx


def confusion(y_true: Sequence, y_pred: Sequence) -> np.ndarray:
    """7x7 count matrix; rows are true classes, columns predicted classes."""
    if len(y_true) != len(y_pred):
        raise ShapeError(f"length mismatch: {len(y_true)} true vs {len(y_pred)} predicted")
    m = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        m[_as_index(t), _as_index(p)] += 1
    return m


@dataclass(frozen=True)
class ClassMetrics:
    label: NarrativeLabel
    precision: float
    recall: float
    f1: float
    support: int
    precision_defined: bool
    recall_defined: bool
    f1_defined: bool


@dataclass(frozen=True)
class Averages:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class MetricReport:
    per_class: tuple[ClassMetrics, ...]
    accuracy: float
    macro: Averages
    weighted: Averages
    total: int

    def to_json(self) -> dict:
        return {
            "per_class": [
                {"class": c.label.value, "precision": c.precision, "recall": c.recall,
                 "f1": c.f1, "support": c.support,
                 "defined": {"precision": c.precision_defined, "recall": c.recall_defined,
                             "f1": c.f1_defined}}
                for c in self.per_class
            ],
            "accuracy": self.accuracy,
            "macro": vars(self.macro),
            "weighted": vars(self.weighted),
            "total": self.total,
        }


def _ratio(num: int, den: int) -> tuple[Fraction, bool]:
    if den == 0:
        return Fraction(0), False
    return Fraction(num, den), True


def report(matrix: np.ndarray) -> MetricReport:
    m = np.asarray(matrix)
    if m.shape != (N_CLASSES, N_CLASSES):
        raise ShapeError(f"confusion matrix must be {N_CLASSES}x{N_CLASSES}, got {m.shape}")
    if (m < 0).any():
        raise ValueError("confusion counts must be non-negative")
    m = [[int(v) for v in row] for row in m]
    total = sum(map(sum, m))
    rows = [sum(r) for r in m]
    cols = [sum(m[i][j] for i in range(N_CLASSES)) for j in range(N_CLASSES)]

    exact = []
    per_class = []
    for k, label in enumerate(LABEL_ORDER):
        tp = m[k][k]
        p, p_ok = _ratio(tp, cols[k])
        r, r_ok = _ratio(tp, rows[k])
        if p + r == 0:
            f1, f1_ok = Fraction(0), False
        else:
            f1, f1_ok = 2 * p * r / (p + r), True
        exact.append((p, r, f1))
        per_class.append(ClassMetrics(label, float(p), float(r), float(f1), rows[k],
                                      p_ok, r_ok, f1_ok))

    def macro(i: int) -> float:
        return float(sum(e[i] for e in exact) / N_CLASSES)

    def weighted(i: int) -> float:
        if total == 0:
            return 0.0
        return float(sum(e[i] * rows[k] for k, e in enumerate(exact)) / total)

    accuracy = float(Fraction(sum(m[k][k] for k in range(N_CLASSES)), total)) if total else 0.0
    return MetricReport(
        per_class=tuple(per_class),
        accuracy=accuracy,
        macro=Averages(macro(0), macro(1), macro(2)),
        weighted=Averages(weighted(0), weighted(1), weighted(2)),
        total=total,
    )


def _triple(p: float, r: float, f: float) -> str:
    return f"{p:.2f} / {r:.2f} / {f:.2f}"


def reports_to_csv(reports: Mapping[str, MetricReport]) -> str:
    """Side-by-side table: one column per model, cells formatted ``P / R / F1``."""
    names = list(reports)
    first = reports[names[0]]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Class (Support)"] + names)
    for k, label in enumerate(LABEL_ORDER):
        support = first.per_class[k].support
        w.writerow([f"{label.value} ({support})"] + [
            _triple(r.per_class[k].precision, r.per_class[k].recall, r.per_class[k].f1)
            for r in reports.values()])
    w.writerow(["Accuracy"] + [f"{r.accuracy:.2f}" for r in reports.values()])
    w.writerow(["Macro Avg (P / R / F1)"] + [
        _triple(r.macro.precision, r.macro.recall, r.macro.f1) for r in reports.values()])
    w.writerow(["Weighted Avg (P / R / F1)"] + [
        _triple(r.weighted.precision, r.weighted.recall, r.weighted.f1) for r in reports.values()])
    return buf.getvalue()


def confusion_to_csv(matrix: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred"] + [lab.value for lab in LABEL_ORDER])
    for label, row in zip(LABEL_ORDER, np.asarray(matrix)):
        w.writerow([label.value] + [int(v) for v in row])
    return buf.getvalue()


def reports_to_json(reports: Mapping[str, MetricReport]) -> str:
    return json.dumps({name: r.to_json() for name, r in reports.items()}, indent=2,
                      sort_keys=True) + "\n"


def accuracy_of(y_true: Iterable, y_pred: Iterable) -> float:
    t = [_as_index(v) for v in y_true]
    p = [_as_index(v) for v in y_pred]
    return report(confusion(t, p)).accuracy
