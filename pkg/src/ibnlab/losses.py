"""Output activations and cross-entropy losses.

Probabilities are clamped to [1e-12, 1 - 1e-12] before any log, which bounds
per-sample loss terms and is part of the documented behavior, not a hack.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    NumericError,
    ShapeError,
    Tensor,
    clip,
    elementwise,
    expand_cols,
    mean_all,
    mul,
    power,
    record_op,
    reduce,
    sub,
)

PROB_CLAMP = 1e-12


@dataclass
class LossSpec:
    """Loss configuration: kind plus optional reweighting and smoothing.

    class_weights: per-class positive weights indexed by class id, applied by
    the sample's true class. label_smoothing: mass alpha moved off the true
    class, spread uniformly over the other C-1 classes.
    """

    kind: str = "cce"
    class_weights: Optional[np.ndarray] = None
    label_smoothing: float = 0.0

    def __post_init__(self):
        if self.kind not in ("cce", "bce"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if w.ndim != 1 or w.size == 0 or np.any(w <= 0):
                raise ValueError("class_weights must be a positive vector")
            self.class_weights = w

    def tag(self) -> str:
        """Short loss label for result rows, e.g. cce, bce[wl], cce[ls=0.1]."""
        mods = []
        if self.class_weights is not None:
            mods.append("wl")
        if self.label_smoothing > 0:
            mods.append(f"ls={self.label_smoothing:g}")
        return self.kind + (f"[{','.join(mods)}]" if mods else "")


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; rows sum to 1, entries > 0."""
    z = logits.data
    if z.ndim != 2 or z.shape[1] < 2:
        raise ShapeError(f"softmax wants (m, C>=2) logits, got {z.shape}")
    m, c = z.shape
    # subtracting the row max leaves the result unchanged, so it is safe to
    # treat the max as a constant for gradients
    rowmax = Tensor(np.broadcast_to(z.max(axis=1, keepdims=True), z.shape).copy())
    e = elementwise("exp", sub(logits, rowmax))
    denom = power(reduce("sum", e, axis=1), -1.0)
    return mul(e, expand_cols(denom, c))


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function, stable for large |x|."""
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return record_op(out, (x,), (lambda g: g * out * (1.0 - out),), "sigmoid")


def class_weights_from_counts(counts) -> np.ndarray:
    """Inverse-frequency weights: w_c = N_total / (C * N_c)."""
    n = np.asarray(counts, dtype=np.float64)
    if n.ndim != 1 or n.size == 0:
        raise ValueError("counts must be a non-empty vector")
    if np.any(n <= 0):
        raise ValueError("every class needs at least one sample")
    return n.sum() / (n.size * n)


def _one_hot(targets, num_classes: int) -> np.ndarray:
    t = np.asarray(targets)
    if t.ndim == 2:
        if t.shape[1] != num_classes:
            raise ShapeError(f"one-hot targets have {t.shape[1]} columns, want {num_classes}")
        return np.asarray(t, dtype=np.float64)
    t = t.astype(np.int64)
    if t.ndim != 1:
        raise ShapeError("targets must be class ids or one-hot rows")
    if t.size and (t.min() < 0 or t.max() >= num_classes):
        raise ValueError(f"target ids outside [0, {num_classes})")
    hot = np.zeros((t.size, num_classes), dtype=np.float64)
    hot[np.arange(t.size), t] = 1.0
    return hot


def _smooth(hot: np.ndarray, alpha: float, num_classes: int) -> np.ndarray:
    if alpha == 0.0:
        return hot
    off = alpha / (num_classes - 1)
    return hot * (1.0 - alpha) + (1.0 - hot) * off


def cross_entropy(probs: Tensor, targets, spec: LossSpec) -> Tensor:
    """Mean cross-entropy over a batch of probability rows.

    cce: -(1/m) sum_i w_{y_i} sum_c t'_ic log p_ic  (t' smoothed one-hot)
    bce: -(1/m) sum_i w_{y_i} sum_c [t'_ic log p_ic + (1-t'_ic) log(1-p_ic)]

    For a single-column sigmoid head, targets are the binary class ids and
    smoothing/weights use C=2 semantics.
    """
    p = probs.data
    if p.ndim != 2 or p.shape[0] == 0:
        raise ShapeError(f"probs must be a non-empty (m, C) matrix, got {p.shape}")
    if float(p.min()) < 0.0 or float(p.max()) > 1.0 + 1e-9:
        raise NumericError("probs outside [0, 1]")
    m, cols = p.shape
    num_classes = 2 if cols == 1 else cols

    t = np.asarray(targets)
    if t.ndim == 1:
        ids = t.astype(np.int64)
    else:
        ids = np.argmax(np.asarray(t, dtype=np.float64), axis=1)
    if ids.shape[0] != m:
        raise ShapeError(f"{ids.shape[0]} targets for {m} probability rows")

    if cols == 1:
        hot2 = _smooth(_one_hot(ids, 2), spec.label_smoothing, 2)
        tmat = hot2[:, 1:2]  # P(class 1) is the single column
    else:
        if spec.kind == "cce" and cols < 2:
            raise ShapeError("cce needs at least two probability columns")
        tmat = _smooth(_one_hot(t if t.ndim == 2 else ids, cols), spec.label_smoothing, cols)

    if spec.class_weights is not None:
        if spec.class_weights.size != num_classes:
            raise ValueError(
                f"{spec.class_weights.size} class weights for {num_classes} classes"
            )
        w = spec.class_weights[ids]
    else:
        w = np.ones(m, dtype=np.float64)

    pc = clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    tconst = Tensor(tmat, copy=False)
    if spec.kind == "cce":
        per_sample = reduce("sum", mul(tconst, elementwise("log", pc)), axis=1)
    else:
        pos = mul(tconst, elementwise("log", pc))
        neg = mul(sub(Tensor(1.0), tconst), elementwise("log", sub(Tensor(1.0), pc)))
        per_sample = reduce("sum", elementwise("add", pos, neg), axis=1)
    weighted = mul(per_sample, Tensor(w, copy=False))
    return mul(mean_all(weighted), Tensor(-1.0))
