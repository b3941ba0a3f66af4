"""Classification metrics and calibration measures.

Per-class scores use one-vs-rest counts. F1 follows the 0/0 -> 0 convention
so an absent or never-predicted class scores zero instead of raising. ECE
bins samples by their top probability into equal-width bins over (0, 1];
Brier is the full-vector squared error (range [0, 2] for one-hot targets).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass
class ConfusionCounts:
    """One-vs-rest integer counts per class."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.tp.size

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0]) if self.tp.size else 0


def confusion_counts(predicted, truth, num_classes: int) -> ConfusionCounts:
    p = np.asarray(predicted, dtype=np.int64)
    t = np.asarray(truth, dtype=np.int64)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError(f"predicted {p.shape} and truth {t.shape} must be equal-length vectors")
    if p.size == 0:
        raise ValueError("empty prediction set")
    for name, a in (("predicted", p), ("truth", t)):
        if a.min() < 0 or a.max() >= num_classes:
            raise ValueError(f"{name} ids outside [0, {num_classes})")
    matrix = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    matrix = matrix.reshape(num_classes, num_classes)
    tp = np.diag(matrix).copy()
    fp = matrix.sum(axis=0) - tp
    fn = matrix.sum(axis=1) - tp
    tn = p.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def f1_from_precision_recall(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def precision_recall_f1(counts: ConfusionCounts, class_id: int) -> tuple[float, float, float]:
    if not 0 <= class_id < counts.num_classes:
        raise ValueError(f"class {class_id} outside [0, {counts.num_classes})")
    tp = float(counts.tp[class_id])
    fp = float(counts.fp[class_id])
    fn = float(counts.fn[class_id])
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return precision, recall, f1_from_precision_recall(precision, recall)


def accuracy(counts: ConfusionCounts) -> float:
    return float(counts.tp.sum()) / counts.total


def _validate_probs(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0 or p.shape[1] < 2:
        raise ValueError(f"need a non-empty (n, C>=2) probability matrix, got {p.shape}")
    if np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-6:
        raise ValueError("probability rows must sum to 1 within 1e-6")
    return p


def predict(probs: np.ndarray) -> np.ndarray:
    """Argmax per row; ties resolve to the lowest class id."""
    return np.argmax(_validate_probs(probs), axis=1)


def expected_calibration_error(probs, truth, num_bins: int = 10) -> float:
    """Gap between confidence and accuracy, averaged over occupancy-weighted bins.

    Bin b covers (b/B, (b+1)/B]; a sample lands in the bin holding its top
    probability. ECE = sum_b (n_b / N) * |acc_b - conf_b|.
    """
    p = _validate_probs(probs)
    t = np.asarray(truth, dtype=np.int64)
    if t.shape != (p.shape[0],):
        raise ValueError("truth must align with probability rows")
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    conf = p.max(axis=1)
    correct = (np.argmax(p, axis=1) == t).astype(np.float64)
    bins = np.ceil(conf * num_bins).astype(np.int64) - 1
    bins = np.clip(bins, 0, num_bins - 1)
    n = p.shape[0]
    ece = 0.0
    for b in range(num_bins):
        mask = bins == b
        nb = int(mask.sum())
        if nb == 0:
            continue
        ece += (nb / n) * abs(correct[mask].mean() - conf[mask].mean())
    return float(ece)


def brier_score(probs, truth) -> float:
    """(1/N) sum_i sum_c (p_ic - [y_i == c])^2."""
    p = _validate_probs(probs)
    t = np.asarray(truth, dtype=np.int64)
    if t.shape != (p.shape[0],):
        raise ValueError("truth must align with probability rows")
    hot = np.zeros_like(p)
    hot[np.arange(t.size), t] = 1.0
    return float(((p - hot) ** 2).sum(axis=1).mean())


@dataclass
class ConfidenceRecord:
    """Full probability row for one evaluated sample."""

    sample_id: int
    true_class: int
    predicted_class: int
    probs: np.ndarray


CONFIDENCE_BANDS = ((0.0, 0.5), (0.5, 0.75), (0.75, 1.0))


def confidence_profile(records: Sequence[ConfidenceRecord]) -> dict[int, dict]:
    """Per true class: min/median/max of P(true class) and band occupancy.

    Bands are [0, 0.5), [0.5, 0.75), [0.75, 1].
    """
    if not records:
        raise ValueError("no confidence records")
    by_class: dict[int, list[float]] = {}
    for r in records:
        by_class.setdefault(r.true_class, []).append(float(r.probs[r.true_class]))
    out = {}
    for cls, vals in sorted(by_class.items()):
        arr = np.asarray(vals)
        bands = (
            int((arr < 0.5).sum()),
            int(((arr >= 0.5) & (arr < 0.75)).sum()),
            int((arr >= 0.75).sum()),
        )
        out[cls] = {
            "count": arr.size,
            "min": float(arr.min()),
            "median": float(np.median(arr)),
            "max": float(arr.max()),
            "bands": bands,
        }
    return out


@dataclass
class MetricsReport:
    """Evaluation summary: per-class scores plus run-level calibration."""

    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    accuracy: float
    ece: float
    brier: float
    confidence_records: list[ConfidenceRecord] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.f1.size


def compute_metrics(
    probs: np.ndarray,
    truth: np.ndarray,
    sample_ids: Sequence[int] | None = None,
    num_bins: int = 10,
) -> MetricsReport:
    p = _validate_probs(probs)
    t = np.asarray(truth, dtype=np.int64)
    num_classes = p.shape[1]
    pred = predict(p)
    counts = confusion_counts(pred, t, num_classes)
    triples = [precision_recall_f1(counts, c) for c in range(num_classes)]
    ids = range(t.size) if sample_ids is None else sample_ids
    records = [
        ConfidenceRecord(int(sid), int(tc), int(pc), row)
        for sid, tc, pc, row in zip(ids, t, pred, p)
    ]
    return MetricsReport(
        precision=np.array([x[0] for x in triples]),
        recall=np.array([x[1] for x in triples]),
        f1=np.array([x[2] for x in triples]),
        accuracy=accuracy(counts),
        ece=expected_calibration_error(p, t, num_bins),
        brier=brier_score(p, t),
        confidence_records=records,
    )


def confidence_csv_header(num_classes: int) -> list[str]:
    return ["sample_id", "true_class", "predicted_class"] + [
        f"prob_{c}" for c in range(num_classes)
    ]


def write_confidence_csv(records: Iterable[ConfidenceRecord], path) -> None:
    records = list(records)
    if not records:
        raise ValueError("no confidence records to write")
    num_classes = records[0].probs.size
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(confidence_csv_header(num_classes))
        for r in sorted(records, key=lambda r: r.sample_id):
            writer.writerow(
                [r.sample_id, r.true_class, r.predicted_class]
                + [f"{v:.6g}" for v in r.probs]
            )


def read_confidence_csv(path) -> list[ConfidenceRecord]:
    with open(path, "r", newline="", encoding="ascii") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["sample_id", "true_class", "predicted_class"]:
        raise ValueError(f"{path}: not a confidence dump")
    out = []
    for row in rows[1:]:
        out.append(
            ConfidenceRecord(
                int(row[0]),
                int(row[1]),
                int(row[2]),
                np.array([float(v) for v in row[3:]]),
            )
        )
    return out
