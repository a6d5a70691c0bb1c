"""Confusion matrices, precision/recall/F1, ROC/AUC and per-tumour-type
tile-accuracy aggregation. Everything here is a pure function."""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import AggregationError, MetricInputError, RocUndefinedError
from .validation import check_consistent_length, check_label_vector


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[i, j]`` = tiles of true class ``i`` predicted as ``j``."""

    counts: np.ndarray
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise MetricInputError(f"confusion matrix must be square, got {counts.shape}")
        if (counts < 0).any():
            raise MetricInputError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", counts)
        names = tuple(self.class_names) or tuple(str(i) for i in range(counts.shape[0]))
        if len(names) != counts.shape[0]:
            raise MetricInputError("class_names length does not match matrix size")
        object.__setattr__(self, "class_names", names)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred", *self.class_names])
            for name, row in zip(self.class_names, self.counts):
                w.writerow([name, *row.tolist()])
        return path

    @classmethod
    def from_csv(cls, path) -> "ConfusionMatrix":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        names = tuple(rows[0][1:])
        return cls(np.array([[int(v) for v in r[1:]] for r in rows[1:]]), names)


def confusion(y_true, y_pred, n_classes: int, class_names: Sequence[str] = ()) -> ConfusionMatrix:
    y_true = check_label_vector(y_true, n_classes, "y_true")
    y_pred = check_label_vector(y_pred, n_classes, "y_pred")
    check_consistent_length(y_true, y_pred)
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts, tuple(class_names))


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class MetricReport:
    per_class: dict[str, ClassMetrics]
    weighted: tuple[float, float, float]
    accuracy: float
    n_samples: int
    # human-readable notes on zero-denominator cells (metric reported as 0)
    warnings: tuple[str, ...] = field(default_factory=tuple)

    @property
    def degenerate(self) -> bool:
        return bool(self.warnings)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "n_samples": self.n_samples,
            "weighted": dict(zip(("precision", "recall", "f1"), self.weighted)),
            "per_class": {
                name: {"precision": m.precision, "recall": m.recall, "f1": m.f1, "support": m.support}
                for name, m in self.per_class.items()
            },
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        w = d["weighted"]
        return cls(
            per_class={k: ClassMetrics(**v) for k, v in d["per_class"].items()},
            weighted=(w["precision"], w["recall"], w["f1"]),
            accuracy=d["accuracy"],
            n_samples=d["n_samples"],
            warnings=tuple(d.get("warnings", ())),
        )


def _ratio(num, den, what, warnings) -> float:
    if den == 0:
        warnings.append(what)
        return 0.0
    return num / den


def report(cm: ConfusionMatrix) -> MetricReport:
    """Per-class and support-weighted precision/recall/F1 plus accuracy."""
    counts = cm.counts
    rows, cols = counts.sum(axis=1), counts.sum(axis=0)
    warnings: list[str] = []
    per_class = {}
    for c, name in enumerate(cm.class_names):
        tp = int(counts[c, c])
        p = _ratio(tp, int(cols[c]), f"{name}: no predictions, precision set to 0", warnings)
        r = _ratio(tp, int(rows[c]), f"{name}: no true samples, recall set to 0", warnings)
        f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        per_class[name] = ClassMetrics(p, r, f1, int(rows[c]))
    total = int(rows.sum())
    if total:
        weighted = tuple(
            sum(getattr(m, k) * m.support for m in per_class.values()) / total
            for k in ("precision", "recall", "f1")
        )
    else:
        weighted = (0.0, 0.0, 0.0)
    accuracy = _ratio(int(np.trace(counts)), total, "empty matrix, accuracy set to 0", warnings)
    return MetricReport(per_class, weighted, accuracy, total, tuple(warnings))


# --------------------------------------------------------------------------- ROC


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    positive_class: int = 1

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "fpr", "tpr"])
            for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
                w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])
        return path

    @classmethod
    def from_csv(cls, path, auc: float | None = None, positive_class: int = 1) -> "RocCurve":
        data = np.genfromtxt(path, delimiter=",", names=True, dtype=float)
        data = np.atleast_1d(data)
        fpr, tpr = data["fpr"], data["tpr"]
        if auc is None:
            auc = trapezoid_auc(fpr, tpr)
        return cls(data["threshold"], fpr, tpr, auc, positive_class)


def trapezoid_auc(fpr, tpr) -> float:
    fpr, tpr = np.asarray(fpr, float), np.asarray(tpr, float)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc(scores, labels, positive_class: int = 1) -> RocCurve:
    """ROC over every distinct score threshold.

    Tied scores share one threshold, so each tie group contributes one
    diagonal step. The first point is ``(0, 0)`` at threshold ``+inf``.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.ndim != 1:
        raise MetricInputError("scores must be one-dimensional")
    check_consistent_length(scores, labels)
    if not np.isfinite(scores).all():
        raise MetricInputError("scores must be finite")
    pos = labels == positive_class
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise RocUndefinedError("ROC needs at least one positive and one negative label")
    order = np.argsort(-scores, kind="mergesort")
    s, p = scores[order], pos[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(p)[ends]
    fps = (ends + 1) - tps
    thresholds = np.r_[np.inf, s[ends]]
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    return RocCurve(thresholds, fpr, tpr, trapezoid_auc(fpr, tpr), positive_class)


def rank_auc(scores, labels, positive_class: int = 1) -> float:
    """AUC as P(score of random positive > random negative), ties counting 1/2."""
    from scipy.stats import rankdata

    scores = np.asarray(scores, dtype=float)
    pos = np.asarray(labels) == positive_class
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise RocUndefinedError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# --------------------------------------------------------------------------- aggregation

# tile accuracy of a tumour type = mean accuracy of the binary tasks involving it
TUMOR_TYPE_TASKS = {
    "NT": ("NT_vs_REST", "NCT_vs_NT", "VT_vs_NT"),
    "NCT": ("NCT_vs_NT", "NCT_vs_VT"),
    "VT": ("VT_vs_NT", "NCT_vs_VT"),
}


def tumor_type_aggregate(binary_accuracies: Mapping[str, float], percent: bool = False) -> dict[str, float]:
    for tasks in TUMOR_TYPE_TASKS.values():
        for t in tasks:
            if t not in binary_accuracies or binary_accuracies[t] is None:
                raise AggregationError(f"missing accuracy for task {t}")
    out = {}
    for kind, tasks in TUMOR_TYPE_TASKS.items():
        value = statistics.mean(float(binary_accuracies[t]) for t in tasks)
        out[kind] = value * 100.0 if percent else value
    return out


# --------------------------------------------------------------------------- persistence


def write_metrics_json(path, rep: MetricReport, extra: Mapping | None = None) -> Path:
    doc = rep.to_dict()
    if extra:
        doc.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_metrics_json(path) -> dict:
    return json.loads(Path(path).read_text())

