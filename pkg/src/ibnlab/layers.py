"""Neural network layers and model assembly.

The interesting layer here is BatchNorm: in Train mode it normalizes each
feature by the batch mean and population variance (divisor m), applies the
learned affine (gamma, beta), and folds the batch statistics into running
estimates; in Infer mode it is a fixed affine built from the running stats.
Placing one of these after the last dense layer, right before the output
activation, is the experimental knob the rest of the package studies.
"""

from __future__ import annotations

import json
import math
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from . import losses
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    add,
    expand_rows,
    matmul,
    max0,
    mul,
    power,
    record_op,
    reduce,
    reshape,
    sub,
    sum_all,
)

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

CHECKPOINT_HEADER = "IBNL1"


class ModelStructureError(ValueError):
    """A model does not have the structure an operation requires."""


class Mode(Enum):
    TRAIN = "train"
    INFER = "infer"


class Layer:
    def forward(self, x: Tensor, mode: Mode, rng=None) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return []

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All stored arrays, trainable or not, by name."""
        return {}


class Flatten(Layer):
    def forward(self, x, mode, rng=None):
        m = x.data.shape[0]
        return reshape(x, (m, int(np.prod(x.data.shape[1:]))))


class Dense(Layer):
    """Fully connected layer, weight (in, out), optional bias."""

    def __init__(self, in_features: int, out_features: int, use_bias: bool = True, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        std = math.sqrt(2.0 / in_features)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(rng.normal(0.0, std, (in_features, out_features)), copy=False)
        self.bias = Tensor(np.zeros(out_features), copy=False) if use_bias else None

    def forward(self, x, mode, rng=None):
        if x.data.ndim != 2 or x.data.shape[1] != self.in_features:
            raise ShapeError(
                f"dense wants (m, {self.in_features}), got {x.data.shape}"
            )
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = add(y, expand_rows(self.bias, x.data.shape[0]))
        return y

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def state_arrays(self):
        out = {"weight": self.weight.data}
        if self.bias is not None:
            out["bias"] = self.bias.data
        return out


class BatchNorm(Layer):
    """Per-feature batch normalization over 2-D activations (m, d)."""

    def __init__(self, num_features: int, epsilon: float = 1e-5, momentum: float = 0.1):
        if num_features < 1:
            raise ValueError("num_features must be >= 1")
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < momentum <= 1.0:
            raise ValueError("momentum must be in (0, 1]")
        self.num_features = num_features
        self.epsilon = epsilon
        self.momentum = momentum
        self.gamma = Tensor(np.ones(num_features), copy=False)
        self.beta = Tensor(np.zeros(num_features), copy=False)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def forward(self, x, mode, rng=None):
        xd = x.data
        if xd.ndim != 2 or xd.shape[1] != self.num_features:
            raise ShapeError(f"batchnorm wants (m, {self.num_features}), got {xd.shape}")
        m = xd.shape[0]
        if mode is Mode.TRAIN:
            if m < 2:
                raise ShapeError("batchnorm needs a batch of at least 2 in Train mode")
            mu = reduce("mean", x, axis=0)
            centered = sub(x, expand_rows(mu, m))
            var = reduce("mean", mul(centered, centered), axis=0)  # population, divisor m
            inv_std = power(add(var, Tensor(self.epsilon)), -0.5)
            xhat = mul(centered, expand_rows(inv_std, m))
            y = add(mul(xhat, expand_rows(self.gamma, m)), expand_rows(self.beta, m))
            k = self.momentum
            self.running_mean *= 1.0 - k
            self.running_mean += k * mu.data
            self.running_var *= 1.0 - k
            self.running_var += k * var.data
            batch_mean = y.data.mean(axis=0)
            if float(np.max(np.abs(batch_mean - self.beta.data))) > 1e-9:
                raise AssertionError("batchnorm train output mean drifted from beta")
            return y
        scale = 1.0 / np.sqrt(self.running_var + self.epsilon)
        sc = mul(self.gamma, Tensor(scale, copy=False))
        shift = sub(self.beta, mul(sc, Tensor(self.running_mean, copy=False)))
        return add(mul(x, expand_rows(sc, m)), expand_rows(shift, m))

    def parameters(self):
        return [self.gamma, self.beta]

    def state_arrays(self):
        return {
            "gamma": self.gamma.data,
            "beta": self.beta.data,
            "running_mean": self.running_mean,
            "running_var": self.running_var,
        }


class Conv2D(Layer):
    """2-D cross-correlation (no kernel flip), NCHW layout."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        padding: int = 0,
        use_bias: bool = True,
        rng=None,
    ):
        if stride < 1 or padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = in_channels * kernel_size * kernel_size
        std = math.sqrt(2.0 / fan_in)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.kernels = Tensor(
            rng.normal(0.0, std, (out_channels, in_channels, kernel_size, kernel_size)),
            copy=False,
        )
        self.bias = Tensor(np.zeros(out_channels), copy=False) if use_bias else None

    def _out_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1 or (h + 2 * p - k) % s or (w + 2 * p - k) % s:
            raise ShapeError(
                f"conv output for input {h}x{w} (k={k}, s={s}, p={p}) is not a whole positive size"
            )
        return oh, ow

    def forward(self, x, mode, rng=None):
        xd = x.data
        if xd.ndim != 4 or xd.shape[1] != self.in_channels:
            raise ShapeError(
                f"conv wants (m, {self.in_channels}, h, w), got {xd.shape}"
            )
        m, _, h, w = xd.shape
        oh, ow = self._out_hw(h, w)
        k, s, p = self.kernel_size, self.stride, self.padding
        kd = self.kernels.data
        xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd

        # gather windows: (m, c, k, k, oh, ow), vectorized over the k*k offsets
        cols = np.empty((m, self.in_channels, k, k, oh, ow), dtype=np.float64)
        for ki in range(k):
            for kj in range(k):
                cols[:, :, ki, kj] = xp[:, :, ki : ki + s * oh : s, kj : kj + s * ow : s]
        cols_mat = cols.reshape(m, self.in_channels * k * k, oh * ow)
        w_mat = kd.reshape(self.out_channels, self.in_channels * k * k)
        out = np.einsum("oc,mcp->mop", w_mat, cols_mat, optimize=True)
        out = out.reshape(m, self.out_channels, oh, ow)
        if self.bias is not None:
            out = out + self.bias.data[None, :, None, None]

        xp_shape = xp.shape

        def grad_x(g):
            g_mat = g.reshape(m, self.out_channels, oh * ow)
            dcols = np.einsum("oc,mop->mcp", w_mat, g_mat, optimize=True)
            dcols = dcols.reshape(m, self.in_channels, k, k, oh, ow)
            dxp = np.zeros(xp_shape, dtype=np.float64)
            for ki in range(k):
                for kj in range(k):
                    dxp[:, :, ki : ki + s * oh : s, kj : kj + s * ow : s] += dcols[:, :, ki, kj]
            return dxp[:, :, p : p + h, p : p + w] if p else dxp

        def grad_kernels(g):
            g_mat = g.reshape(m, self.out_channels, oh * ow)
            dw = np.einsum("mop,mcp->oc", g_mat, cols_mat, optimize=True)
            return dw.reshape(kd.shape)

        grad_fns = [grad_x, grad_kernels]
        inputs = [x, self.kernels]
        if self.bias is not None:
            inputs.append(self.bias)
            grad_fns.append(lambda g: g.sum(axis=(0, 2, 3)))
        return record_op(out, inputs, grad_fns, "conv2d")

    def parameters(self):
        return [self.kernels] if self.bias is None else [self.kernels, self.bias]

    def state_arrays(self):
        out = {"kernels": self.kernels.data}
        if self.bias is not None:
            out["bias"] = self.bias.data
        return out


class MaxPool2x2(Layer):
    """2x2 max pooling with stride 2; ties route the gradient to the first max."""

    def forward(self, x, mode, rng=None):
        xd = x.data
        if xd.ndim != 4:
            raise ShapeError(f"maxpool wants (m, c, h, w), got {xd.shape}")
        m, c, h, w = xd.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool wants even spatial dims, got {h}x{w}")
        oh, ow = h // 2, w // 2
        windows = (
            xd.reshape(m, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(m, c, oh, ow, 4)
        )
        idx = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

        def grad(g):
            dwin = np.zeros((m, c, oh, ow, 4), dtype=np.float64)
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            return (
                dwin.reshape(m, c, oh, ow, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(m, c, h, w)
            )

        return record_op(out, (x,), (grad,), "maxpool2x2")


class GlobalAveragePool(Layer):
    """Mean over the spatial dims: (m, c, h, w) -> (m, c)."""

    def forward(self, x, mode, rng=None):
        xd = x.data
        if xd.ndim != 4:
            raise ShapeError(f"global average pool wants (m, c, h, w), got {xd.shape}")
        m, c, h, w = xd.shape
        inv = 1.0 / (h * w)

        def grad(g):
            return np.broadcast_to(g[:, :, None, None] * inv, xd.shape)

        return record_op(xd.mean(axis=(2, 3)), (x,), (grad,), "global_average_pool")


class Activation(Layer):
    def __init__(self, kind: str):
        if kind not in ("relu", "selu"):
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x, mode, rng=None):
        if self.kind == "relu":
            return max0(x)
        xd = x.data
        neg = xd <= 0.0
        ex = np.exp(np.minimum(xd, 0.0))
        out = np.where(neg, SELU_LAMBDA * SELU_ALPHA * (ex - 1.0), SELU_LAMBDA * xd)
        local = np.where(neg, SELU_LAMBDA * SELU_ALPHA * ex, SELU_LAMBDA)
        return record_op(out, (x,), (lambda g: g * local,), "selu")


class Dropout(Layer):
    """Inverted dropout: active only in Train mode, identity in Infer mode."""

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate

    def forward(self, x, mode, rng=None):
        if mode is not Mode.TRAIN or self.rate == 0.0:
            return x
        if rng is None:
            raise ValueError("dropout in Train mode needs an rng")
        keep = (rng.random(x.data.shape) >= self.rate) / (1.0 - self.rate)
        return mul(x, Tensor(keep, copy=False))


class Softmax(Layer):
    def forward(self, x, mode, rng=None):
        return losses.softmax(x)


class Sigmoid(Layer):
    def forward(self, x, mode, rng=None):
        return losses.sigmoid(x)


class Model:
    """An ordered stack of layers with an explicit Train/Infer mode."""

    def __init__(self, layers: Sequence[Layer], spec: Optional[dict] = None):
        self.layers = list(layers)
        self.mode = Mode.INFER
        self.spec = dict(spec) if spec else {}

    def forward(self, x: Tensor, rng=None) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x, self.mode, rng)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def parameter_count(self) -> int:
        """Total stored floats, running statistics included."""
        return sum(
            arr.size for layer in self.layers for arr in layer.state_arrays().values()
        )

    def named_state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.state_arrays().items():
                out[f"layer{i}.{name}"] = arr
        return out


def build_fc_model(
    num_classes: int = 2,
    first_bn: bool = False,
    final_bn: bool = True,
    output: str = "softmax",
    hidden: int = 128,
    use_bias_last: bool = True,
    dropout: Optional[float] = None,
    in_features: int = 784,
    seed: int = 0,
) -> Model:
    """Flatten -> Dense -> [BN] -> ReLU -> [Dropout] -> Dense -> [BN] -> output."""
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    if output not in ("softmax", "sigmoid"):
        raise ValueError(f"unknown output {output!r}")
    if output == "sigmoid" and num_classes > 2:
        raise ValueError("sigmoid output only supports binary problems")
    if output == "softmax" and num_classes < 2:
        raise ValueError("softmax output needs at least two classes")
    rng = np.random.default_rng([seed, 0x1B])
    out_width = 1 if output == "sigmoid" else num_classes
    layers: list[Layer] = [Flatten(), Dense(in_features, hidden, rng=rng)]
    if first_bn:
        layers.append(BatchNorm(hidden))
    layers.append(Activation("relu"))
    if dropout is not None:
        layers.append(Dropout(dropout))
    layers.append(Dense(hidden, out_width, use_bias=use_bias_last, rng=rng))
    if final_bn:
        layers.append(BatchNorm(out_width))
    layers.append(Softmax() if output == "softmax" else Sigmoid())
    spec = {
        "arch": "fc",
        "num_classes": num_classes,
        "first_bn": first_bn,
        "final_bn": final_bn,
        "output": output,
        "hidden": hidden,
        "use_bias_last": use_bias_last,
        "dropout": dropout,
        "in_features": in_features,
    }
    return Model(layers, spec)


SIMPLE_CNN_CHANNELS = (8, 16, 16, 32, 32)


def build_simple_cnn(num_classes: int = 2, final_bn: bool = True, seed: int = 0) -> Model:
    """Five 3x3 conv blocks (pool after blocks 2 and 4), GAP, dense head."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    rng = np.random.default_rng([seed, 0x2C])
    layers: list[Layer] = []
    in_ch = 1
    for i, out_ch in enumerate(SIMPLE_CNN_CHANNELS, start=1):
        layers.append(Conv2D(in_ch, out_ch, kernel_size=3, stride=1, padding=1, rng=rng))
        layers.append(Activation("relu"))
        if i in (2, 4):
            layers.append(MaxPool2x2())
        in_ch = out_ch
    layers.append(GlobalAveragePool())
    layers.append(Dense(in_ch, num_classes, rng=rng))
    if final_bn:
        layers.append(BatchNorm(num_classes))
    layers.append(Softmax())
    spec = {"arch": "simple_cnn", "num_classes": num_classes, "final_bn": final_bn}
    return Model(layers, spec)


def strip_final_bn(model: Model) -> Model:
    """Drop the BatchNorm sitting right before the output activation.

    The returned model shares every remaining layer (and its parameters) with
    the original; it is meant for inference-time comparisons.
    """
    if len(model.layers) < 2 or not isinstance(model.layers[-1], (Softmax, Sigmoid)):
        raise ModelStructureError("model does not end in an output activation")
    if not isinstance(model.layers[-2], BatchNorm):
        raise ModelStructureError("no final BatchNorm to strip")
    spec = dict(model.spec)
    if "final_bn" in spec:
        spec["final_bn"] = False
    stripped = Model(model.layers[:-2] + [model.layers[-1]], spec)
    stripped.mode = model.mode
    return stripped


def batchnorm_backward_check(bn: BatchNorm, x: np.ndarray, h: float = 1e-5) -> dict:
    """Compare Train-mode BN gradients against central finite differences.

    Returns max relative errors for the input, gamma, and beta. Running
    statistics are snapshotted and restored, so the check has no side effects.
    """
    x = np.asarray(x, dtype=np.float64)
    saved = (bn.running_mean.copy(), bn.running_var.copy())
    rng = np.random.default_rng(0xBACC)
    proj = rng.normal(size=x.shape)

    def run(xd: np.ndarray) -> float:
        out = bn.forward(Tensor(xd), Mode.TRAIN)
        return float((out.data * proj).sum())

    try:
        xt = Tensor(x)
        with Tape() as tape:
            tape.watch(xt)
            tape.watch(bn.gamma)
            tape.watch(bn.beta)
            out = bn.forward(xt, Mode.TRAIN)
            loss = sum_all(mul(out, Tensor(proj, copy=False)))
        grads = tape.backward(loss)

        def fd_over(arr: np.ndarray) -> np.ndarray:
            g = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                i = it.multi_index
                keep = arr[i]
                arr[i] = keep + h
                fp = run(xt.data)
                arr[i] = keep - h
                fm = run(xt.data)
                arr[i] = keep
                g[i] = (fp - fm) / (2.0 * h)
                it.iternext()
            return g

        def rel(a, b):
            denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-4)
            return float(np.max(np.abs(a - b) / denom))

        report = {
            "max_rel_x": rel(grads[xt.node_id].data, fd_over(xt.data)),
            "max_rel_gamma": rel(grads[bn.gamma.node_id].data, fd_over(bn.gamma.data)),
            "max_rel_beta": rel(grads[bn.beta.node_id].data, fd_over(bn.beta.data)),
        }
        report["max_rel"] = max(report.values())
        report["passed"] = report["max_rel"] <= 1e-4
        return report
    finally:
        bn.running_mean[...] = saved[0]
        bn.running_var[...] = saved[1]


_LAYER_BUILDERS = {"fc": build_fc_model, "simple_cnn": build_simple_cnn}


def save_model(model: Model, path) -> None:
    """Write a versioned text checkpoint: header, spec JSON, named tensors."""
    if not model.spec.get("arch"):
        raise ModelStructureError("model has no arch spec; cannot checkpoint")
    lines = [CHECKPOINT_HEADER, json.dumps(model.spec, sort_keys=True)]
    for name, arr in model.named_state().items():
        dims = ",".join(str(d) for d in arr.shape)
        lines.append(f"{name} {dims}")
        lines.append(" ".join(repr(float(v)) for v in arr.ravel()))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> Model:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ModelStructureError(
            f"{path}: not a {CHECKPOINT_HEADER} checkpoint (header {lines[0]!r})"
            if lines
            else f"{path}: empty checkpoint"
        )
    spec = json.loads(lines[1])
    arch = spec.pop("arch", None)
    if arch not in _LAYER_BUILDERS:
        raise ModelStructureError(f"{path}: unknown arch {arch!r}")
    model = _LAYER_BUILDERS[arch](**spec)
    state = model.named_state()
    i = 2
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        name, dims = lines[i].rsplit(" ", 1)
        shape = tuple(int(d) for d in dims.split(",") if d)
        vals = np.array([float(tok) for tok in lines[i + 1].split()], dtype=np.float64)
        if name not in state:
            raise ModelStructureError(f"{path}: unexpected tensor {name!r}")
        if vals.size != int(np.prod(shape)) or state[name].shape != shape:
            raise ModelStructureError(f"{path}: bad shape for {name!r}")
        state[name][...] = vals.reshape(shape)
        i += 2
    return model
