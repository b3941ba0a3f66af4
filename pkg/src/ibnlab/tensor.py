"""Dense float64 tensors with reverse-mode autodiff on a per-step tape.

Tensors are contiguous row-major float64 arrays. Gradient tracking is opt-in:
open a Tape, watch the leaves you need gradients for, run forward ops, then
call backward(loss) exactly once. The tape records primitives in execution
order (already topological) and replays them once in reverse. Tapes are
single-use and single-threaded; independent tapes may live on other threads.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class NumericError(ArithmeticError):
    """An op produced NaN/Inf or was evaluated outside its domain."""


_LOCAL = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_LOCAL, "tape", None)


class Tensor:
    """Dense float64 array, optionally tracked on a gradient tape."""

    __slots__ = ("data", "node_id", "_tape")

    def __init__(self, data, copy: bool = True):
        if copy:
            arr = np.array(data, dtype=np.float64, order="C")
        else:
            arr = np.asarray(data, dtype=np.float64)
            if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
                arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.node_id: Optional[int] = None
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, tracked={self.node_id is not None})"

    # operator sugar over the module-level primitives
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def tensor_from(shape: Sequence[int], values: Iterable[float]) -> Tensor:
    """Build a tensor from an explicit shape and a flat value sequence."""
    dims = tuple(int(s) for s in shape)
    if any(d < 0 for d in dims):
        raise ShapeError(f"negative extent in shape {dims}")
    vals = np.asarray(list(values), dtype=np.float64)
    want = int(np.prod(dims)) if dims else 1
    if vals.size != want:
        raise ShapeError(f"shape {dims} wants {want} values, got {vals.size}")
    return Tensor(vals.reshape(dims), copy=False)


class Tape:
    """Records one forward pass; replayed in reverse exactly once."""

    def __init__(self) -> None:
        self._next_id = 0
        self._records: list[tuple[int, Callable]] = []
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _LOCAL.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _LOCAL.tape = None

    def _new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def watch(self, t: Tensor) -> int:
        """Mark a leaf tensor so backward reports its gradient."""
        if t._tape is self and t.node_id is not None:
            return t.node_id
        t._tape = self
        t.node_id = self._new_id()
        self._leaves[t.node_id] = t
        return t.node_id

    def _record(self, out: Tensor, backward_fn: Callable) -> None:
        out._tape = self
        out.node_id = self._new_id()
        self._records.append((out.node_id, backward_fn))

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Reverse replay from a scalar loss; one gradient per watched leaf.

        Leaves the loss does not depend on get exact zeros.
        """
        if loss._tape is not self or loss.node_id is None:
            raise ValueError("loss is not on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, has shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for out_id, backward_fn in reversed(self._records):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            backward_fn(g, grads)
        out: dict[int, Tensor] = {}
        for nid, leaf in self._leaves.items():
            g = grads.get(nid)
            if g is None:
                out[nid] = Tensor(np.zeros_like(leaf.data), copy=False)
            else:
                out[nid] = Tensor(g)
        return out


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Backward through the tape the loss was recorded on."""
    if loss._tape is None or loss.node_id is None:
        raise ValueError("loss is not on a tape")
    return loss._tape.backward(loss)


def _check_finite(arr: np.ndarray, name: str) -> None:
    # sum trick: any NaN/Inf poisons the total (inf - inf -> nan)
    if arr.size and not math.isfinite(float(np.sum(arr))):
        raise NumericError(f"{name}: non-finite values in result")


def record_op(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    grad_fns: Sequence[Optional[Callable[[np.ndarray], np.ndarray]]],
    name: str,
) -> Tensor:
    """Wrap a computed array as an op output, recording it if inputs are tracked.

    grad_fns[i] maps the output gradient to input i's gradient contribution;
    pass None for inputs that never need gradients.
    """
    arr = np.asarray(out_data, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    _check_finite(arr, name)
    out = Tensor(arr, copy=False)
    tape = _active_tape()
    if tape is None:
        return out
    tracked = [
        (t.node_id, fn)
        for t, fn in zip(inputs, grad_fns)
        if fn is not None and t._tape is tape and t.node_id is not None
    ]
    if not tracked:
        return out

    def _backward(gout: np.ndarray, grads: dict) -> None:
        for nid, fn in tracked:
            g = fn(gout)
            prev = grads.get(nid)
            grads[nid] = g if prev is None else prev + g

    tape._record(out, _backward)
    return out


def _binary_check(a: Tensor, b: Tensor, op: str) -> None:
    # only scalar-vs-tensor and equal-shape broadcasting
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.data.shape} and {b.data.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "add")
    with np.errstate(over="ignore", invalid="ignore"):
        out_data = a.data + b.data
    return record_op(
        out_data,
        (a, b),
        (lambda g: _reduce_to(g, a.data.shape), lambda g: _reduce_to(g, b.data.shape)),
        "add",
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "sub")
    with np.errstate(over="ignore", invalid="ignore"):
        out_data = a.data - b.data
    return record_op(
        out_data,
        (a, b),
        (lambda g: _reduce_to(g, a.data.shape), lambda g: _reduce_to(-g, b.data.shape)),
        "sub",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "mul")
    ad, bd = a.data, b.data
    with np.errstate(over="ignore", invalid="ignore"):
        out_data = ad * bd
    return record_op(
        out_data,
        (a, b),
        (lambda g: _reduce_to(g * bd, ad.shape), lambda g: _reduce_to(g * ad, bd.shape)),
        "mul",
    )


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(x.data)
    _check_finite(out_data, "exp")
    return record_op(out_data, (x,), (lambda g: g * out_data,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if xd.size and float(xd.min()) <= 0.0:
        raise NumericError("log: non-positive input")
    return record_op(np.log(xd), (x,), (lambda g: g / xd,), "log")


def max0(x: Tensor) -> Tensor:
    xd = x.data
    return record_op(np.maximum(xd, 0.0), (x,), (lambda g: g * (xd > 0.0),), "max0")


def power(x: Tensor, p: float) -> Tensor:
    """x**p elementwise; non-positive bases only allowed for integer p >= 0."""
    xd = x.data
    pf = float(p)
    if (not pf.is_integer() or pf < 0) and xd.size and float(xd.min()) <= 0.0:
        raise NumericError(f"power: non-positive base with exponent {pf}")
    with np.errstate(over="ignore"):
        out_data = xd**pf
    _check_finite(out_data, "power")
    return record_op(out_data, (x,), (lambda g: g * pf * xd ** (pf - 1.0),), "power")


_ELEMENTWISE_UNARY = {"exp": exp, "log": log, "max0": max0}
_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Named elementwise dispatch: add/sub/mul (binary), exp/log/max0 (unary)."""
    if op in _ELEMENTWISE_BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _ELEMENTWISE_BINARY[op](a, b)
    if op in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ValueError(f"{op} takes one operand")
        return _ELEMENTWISE_UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} vs {bd.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out_data = ad @ bd
    return record_op(
        out_data,
        (a, b),
        (lambda g: g @ bd.T, lambda g: ad.T @ g),
        "matmul",
    )


def reduce(op: str, x: Tensor, axis: int) -> Tensor:
    """Sum or mean over one axis."""
    xd = x.data
    if not 0 <= axis < xd.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {xd.ndim}")
    extent = xd.shape[axis]
    if extent == 0:
        raise ShapeError("cannot reduce over an empty axis")
    if op == "sum":
        scale = 1.0
    elif op == "mean":
        scale = 1.0 / extent
    else:
        raise ValueError(f"unknown reduce op {op!r}")

    def grad(g: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.expand_dims(g, axis) * scale, xd.shape)

    return record_op(xd.sum(axis=axis) * scale, (x,), (grad,), f"reduce:{op}")


def sum_all(x: Tensor) -> Tensor:
    xd = x.data
    return record_op(
        np.asarray(xd.sum()), (x,), (lambda g: np.broadcast_to(g, xd.shape),), "sum_all"
    )


def mean_all(x: Tensor) -> Tensor:
    xd = x.data
    if xd.size == 0:
        raise ShapeError("mean of an empty tensor")
    inv = 1.0 / xd.size
    return record_op(
        np.asarray(xd.mean()),
        (x,),
        (lambda g: np.broadcast_to(g * inv, xd.shape),),
        "mean_all",
    )


def expand_rows(v: Tensor, rows: int) -> Tensor:
    """Tile a feature vector (d,) into (rows, d); gradient sums over rows."""
    vd = v.data
    if vd.ndim != 1:
        raise ShapeError(f"expand_rows wants a vector, got shape {vd.shape}")
    return record_op(
        np.broadcast_to(vd, (rows, vd.shape[0])),
        (v,),
        (lambda g: g.sum(axis=0),),
        "expand_rows",
    )


def expand_cols(v: Tensor, cols: int) -> Tensor:
    """Tile a column (m,) into (m, cols); gradient sums over columns."""
    vd = v.data
    if vd.ndim != 1:
        raise ShapeError(f"expand_cols wants a vector, got shape {vd.shape}")
    return record_op(
        np.broadcast_to(vd[:, None], (vd.shape[0], cols)),
        (v,),
        (lambda g: g.sum(axis=1),),
        "expand_cols",
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    xd = x.data
    out_data = xd.reshape(tuple(shape))
    return record_op(out_data, (x,), (lambda g: g.reshape(xd.shape),), "reshape")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside the interval."""
    xd = x.data
    inside = (xd > lo) & (xd < hi)
    return record_op(np.clip(xd, lo, hi), (x,), (lambda g: g * inside,), "clip")
