"""Training loop, evaluation, and repeated-experiment aggregation.

One experiment = one ExperimentConfig. A config fully determines the split,
the model init, the batch order, and therefore every emitted number; repeats
re-run the same config on a seed ladder (seed, seed+1, ...) and report mean
and sample standard deviation per metric.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .data import (
    Dataset,
    ImbalanceSpec,
    SplitBundle,
    batch_iterator,
    build_imbalanced_split,
)
from .layers import Mode, Model, build_fc_model, build_simple_cnn, strip_final_bn
from .losses import LossSpec, class_weights_from_counts, cross_entropy
from .metrics import MetricsReport, compute_metrics
from .tensor import NumericError, ShapeError, Tape, Tensor

RESULT_COLUMNS = [
    "run_id",
    "seed",
    "arch",
    "final_bn",
    "first_bn",
    "output",
    "loss",
    "ratio",
    "batch_size",
    "epochs",
    "class",
    "precision",
    "recall",
    "f1",
    "ece",
    "brier",
]


class TrainingDivergedError(RuntimeError):
    """Loss or parameters stopped being finite; names the epoch and batch."""


@dataclass
class OptimizerState:
    """SGD with momentum and decoupled-from-nothing classic weight decay.

    Velocities are created lazily on the first step and must keep matching
    the parameter list afterwards.

    The defaults are plain SGD (no momentum) with a mild weight decay: with
    one minority sample per few batches, momentum multiplies the effective
    step on the rare-class gradient tenfold and washes out the head-type
    comparisons this package exists to measure, while the decay keeps the
    classifier head well-conditioned over a 100-epoch run.
    """

    learning_rate: float = 0.009
    momentum: float = 0.0
    weight_decay: float = 0.07
    velocities: Optional[list[np.ndarray]] = None

    def __post_init__(self) -> None:
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


def sgd_step(params: list[Tensor], grads: list, state: OptimizerState) -> None:
    """v <- momentum*v - lr*(g + wd*p); p <- p + v, all in place."""
    if state.velocities is None:
        state.velocities = [np.zeros_like(p.data) for p in params]
    if len(state.velocities) != len(params):
        raise ShapeError(
            f"{len(params)} params but {len(state.velocities)} velocity buffers"
        )
    for p, g, v in zip(params, grads, state.velocities):
        g_arr = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g_arr.shape != p.data.shape or v.shape != p.data.shape:
            raise ShapeError(
                f"gradient {g_arr.shape} does not match parameter {p.data.shape}"
            )
        step = g_arr + state.weight_decay * p.data if state.weight_decay else g_arr
        v *= state.momentum
        v -= state.learning_rate * step
        p.data += v


def _default_imbalance() -> ImbalanceSpec:
    return ImbalanceSpec([8], [3], 1000, 0.01)


@dataclass
class ExperimentConfig:
    """Fully-resolved description of a single experiment."""

    label: str = "run"
    arch: str = "fc"
    imbalance: ImbalanceSpec = field(default_factory=_default_imbalance)
    loss_kind: str = "cce"
    weighted_loss: bool = False
    label_smoothing: float = 0.0
    output: str = "softmax"
    final_bn: bool = True
    first_bn: bool = False
    use_bias_last: bool = True
    dropout: Optional[float] = None
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    strip_bn_at_inference: bool = False
    learning_rate: float = 0.009
    momentum: float = 0.0
    weight_decay: float = 0.07

    def __post_init__(self) -> None:
        if not self.label or any(ch in self.label for ch in ", \t\n"):
            raise ValueError(f"label {self.label!r} must be non-empty, no commas/spaces")
        if self.arch not in ("fc", "simple_cnn"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.output not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown output {self.output!r}")
        if self.loss_kind not in ("cce", "bce"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if self.output == "sigmoid":
            if self.num_classes != 2:
                raise ValueError("sigmoid output requires a binary task")
            if self.loss_kind != "bce":
                raise ValueError("sigmoid output requires loss_kind bce")
        if self.arch == "simple_cnn":
            if self.output != "softmax" or self.first_bn or self.dropout is not None:
                raise ValueError(
                    "simple_cnn supports only softmax output, no first_bn, no dropout"
                )
            if not self.use_bias_last:
                raise ValueError("simple_cnn head always uses a bias")
        if self.strip_bn_at_inference and not self.final_bn:
            raise ValueError("strip_bn_at_inference requires final_bn")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (Train-mode batch statistics)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        # reuse the optimizer validation for the shared hyperparameters
        OptimizerState(self.learning_rate, self.momentum, self.weight_decay)

    @property
    def num_classes(self) -> int:
        return len(self.imbalance.majority_classes) + len(self.imbalance.minority_classes)

    def loss_tag(self) -> str:
        flags = []
        if self.weighted_loss:
            flags.append("wl")
        if self.label_smoothing:
            flags.append(f"ls={self.label_smoothing:g}")
        return self.loss_kind + (f"[{','.join(flags)}]" if flags else "")

    def to_dict(self) -> dict:
        return asdict(self)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Strict construction: unknown keys are errors, not warnings."""
    known = {f.name for f in ExperimentConfig.__dataclass_fields__.values()}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = dict(raw)
    if "imbalance" in kwargs and isinstance(kwargs["imbalance"], dict):
        imb_known = {f.name for f in ImbalanceSpec.__dataclass_fields__.values()}
        imb_unknown = set(kwargs["imbalance"]) - imb_known
        if imb_unknown:
            raise ValueError(f"unknown imbalance keys: {sorted(imb_unknown)}")
        kwargs["imbalance"] = ImbalanceSpec(**kwargs["imbalance"])
    return ExperimentConfig(**kwargs)


def config_hash(cfg: ExperimentConfig) -> str:
    """8-hex-char digest of the resolved config, seed and label excluded."""
    payload = cfg.to_dict()
    payload.pop("seed")
    payload.pop("label")
    blob = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:8]


def run_id(cfg: ExperimentConfig) -> str:
    return f"{cfg.label}-{config_hash(cfg)}-s{cfg.seed}"


def build_model(cfg: ExperimentConfig) -> Model:
    if cfg.arch == "fc":
        return build_fc_model(
            num_classes=cfg.num_classes,
            first_bn=cfg.first_bn,
            final_bn=cfg.final_bn,
            output=cfg.output,
            use_bias_last=cfg.use_bias_last,
            dropout=cfg.dropout,
            seed=cfg.seed,
        )
    return build_simple_cnn(cfg.num_classes, final_bn=cfg.final_bn, seed=cfg.seed)


def train(model: Model, bundle: SplitBundle, cfg: ExperimentConfig) -> tuple[Model, list[float]]:
    """Optimize in place; returns the model (Infer mode) and per-epoch mean loss."""
    counts = np.bincount(bundle.train.labels, minlength=bundle.num_classes)
    weights = class_weights_from_counts(counts) if cfg.weighted_loss else None
    loss_spec = LossSpec(cfg.loss_kind, weights, cfg.label_smoothing)
    opt = OptimizerState(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    params = model.parameters()
    dropout_rng = np.random.default_rng([cfg.seed, 3])
    history: list[float] = []
    model.mode = Mode.TRAIN
    for epoch in range(cfg.epochs):
        batch_losses = []
        batches = batch_iterator(
            bundle.train, cfg.batch_size, seed=cfg.seed, epoch=epoch, train=True
        )
        for batch_index, (images, labels) in enumerate(batches):
            try:
                with Tape() as tape:
                    ids = [tape.watch(p) for p in params]
                    probs = model.forward(Tensor(images, copy=False), rng=dropout_rng)
                    loss = cross_entropy(probs, labels, loss_spec)
                    grads = tape.backward(loss)
            except NumericError as err:
                raise TrainingDivergedError(
                    f"diverged at epoch {epoch}, batch {batch_index}: {err}"
                ) from err
            sgd_step(params, [grads[i] for i in ids], opt)
            batch_losses.append(float(loss.data))
        if not batch_losses:
            raise ValueError(
                f"batch_size {cfg.batch_size} yields no full batch from "
                f"{len(bundle.train)} training samples"
            )
        history.append(float(np.mean(batch_losses)))
    model.mode = Mode.INFER
    return model, history


def evaluate(
    model: Model,
    split: Dataset,
    strip_bn: bool = False,
    num_bins: int = 10,
    batch_size: int = 256,
) -> MetricsReport:
    """Score a split in natural order; never mutates batch statistics."""
    if model.mode is not Mode.INFER:
        raise ValueError("evaluate requires a model in Infer mode")
    target = strip_final_bn(model) if strip_bn else model
    parts = []
    for images, _ in batch_iterator(split, batch_size, train=False):
        out = target.forward(Tensor(images, copy=False)).data
        if out.shape[1] == 1:
            out = np.hstack([1.0 - out, out])
        parts.append(out)
    probs = np.vstack(parts)
    return compute_metrics(probs, split.labels, num_bins=num_bins)


@dataclass
class RunResult:
    """One trained-and-scored run plus its provenance."""

    run_id: str
    config: dict
    seed: int
    history: list[float]
    val: MetricsReport
    test: MetricsReport
    wall_seconds: float
    parameter_count: int

    def rows(self) -> list[dict]:
        """Per-class result rows in the stable CSV column order."""
        base = {
            "run_id": self.run_id,
            "seed": self.seed,
            "arch": self.config["arch"],
            "final_bn": self.config["final_bn"],
            "first_bn": self.config["first_bn"],
            "output": self.config["output"],
            "loss": self.config["loss_tag"],
            "ratio": self.config["imbalance"]["ratio"],
            "batch_size": self.config["batch_size"],
            "epochs": self.config["epochs"],
        }
        out = []
        for c in range(self.test.num_classes):
            row = dict(base)
            row.update(
                {
                    "class": c,
                    "precision": float(self.test.precision[c]),
                    "recall": float(self.test.recall[c]),
                    "f1": float(self.test.f1[c]),
                    "ece": self.test.ece,
                    "brier": self.test.brier,
                }
            )
            out.append(row)
        return out


def run_single(cfg: ExperimentConfig, source: Dataset) -> RunResult:
    started = time.perf_counter()
    bundle = build_imbalanced_split(source, cfg.imbalance, cfg.seed)
    model = build_model(cfg)
    model, history = train(model, bundle, cfg)
    val = evaluate(model, bundle.val, strip_bn=cfg.strip_bn_at_inference)
    test = evaluate(model, bundle.test, strip_bn=cfg.strip_bn_at_inference)
    scored = strip_final_bn(model) if cfg.strip_bn_at_inference else model
    snapshot = cfg.to_dict()
    snapshot["loss_tag"] = cfg.loss_tag()
    return RunResult(
        run_id=run_id(cfg),
        config=snapshot,
        seed=cfg.seed,
        history=history,
        val=val,
        test=test,
        wall_seconds=time.perf_counter() - started,
        parameter_count=scored.parameter_count(),
    )


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: list[RunResult]

    def summary(self) -> dict:
        """Mean and sample std (ddof=1; zero for a single run) per metric."""

        def agg(values: np.ndarray) -> dict:
            mean = float(np.mean(values))
            std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
            return {"mean": mean, "std": std}

        per_class = {}
        num_classes = self.runs[0].test.num_classes
        for c in range(num_classes):
            per_class[str(c)] = {
                metric: agg(np.array([getattr(r.test, metric)[c] for r in self.runs]))
                for metric in ("precision", "recall", "f1")
            }
        return {
            "label": self.config.label,
            "config_hash": config_hash(self.config),
            "num_runs": len(self.runs),
            "classes": per_class,
            "accuracy": agg(np.array([r.test.accuracy for r in self.runs])),
            "ece": agg(np.array([r.test.ece for r in self.runs])),
            "brier": agg(np.array([r.test.brier for r in self.runs])),
        }


def run_experiment(
    cfg: ExperimentConfig, source: Dataset, num_repeats: int = 1
) -> ExperimentResult:
    """Repeat a config over the seed ladder seed, seed+1, ..."""
    if num_repeats < 1:
        raise ValueError("num_repeats must be >= 1")
    runs = [
        run_single(replace(cfg, seed=cfg.seed + k), source) for k in range(num_repeats)
    ]
    return ExperimentResult(cfg, runs)
