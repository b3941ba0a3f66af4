"""ibnlab: a small lab for studying final-layer batch normalization under
extreme class imbalance, built on a from-scratch float64 autodiff engine."""

__version__ = "0.1.0"

from .tensor import (
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    elementwise,
    matmul,
    reduce,
    tensor_from,
)
from .data import (
    Dataset,
    ImbalanceSpec,
    SplitBundle,
    build_imbalanced_split,
    load_idx,
)
from .layers import (
    Mode,
    Model,
    build_fc_model,
    build_simple_cnn,
    load_model,
    save_model,
    strip_final_bn,
)
from .metrics import MetricsReport, compute_metrics
from .presets import PRESET_NAMES, get_preset
from .synthetic import ensure_dataset
from .train import (
    ExperimentConfig,
    ExperimentResult,
    RunResult,
    TrainingDivergedError,
    config_from_dict,
    evaluate,
    run_experiment,
    run_single,
)

__all__ = [
    "Dataset",
    "ExperimentConfig",
    "ExperimentResult",
    "ImbalanceSpec",
    "MetricsReport",
    "Mode",
    "Model",
    "NumericError",
    "PRESET_NAMES",
    "RunResult",
    "ShapeError",
    "SplitBundle",
    "Tape",
    "Tensor",
    "TrainingDivergedError",
    "backward",
    "build_fc_model",
    "build_imbalanced_split",
    "build_simple_cnn",
    "compute_metrics",
    "config_from_dict",
    "elementwise",
    "ensure_dataset",
    "evaluate",
    "get_preset",
    "load_idx",
    "load_model",
    "matmul",
    "reduce",
    "run_experiment",
    "run_single",
    "save_model",
    "strip_final_bn",
    "tensor_from",
    "__version__",
]
