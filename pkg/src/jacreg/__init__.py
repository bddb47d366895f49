"""Exact Jacobian spectral-norm regularization for piecewise-linear networks."""

__version__ = "0.1.0"

from jacreg.errors import (
    CaptureError,
    ConvergenceError,
    DegenerateChannelError,
    IdxParseError,
    ShapeError,
    TrainingDiverged,
)
from jacreg.ndcore import make_rng, max_singular_value_dense, sample_unit_rows
from jacreg.layers import (
    BatchNorm2d,
    Conv2d,
    Flatten,
    Linear,
    MaxPool2d,
    ReLU,
    SmoothActivation,
)
from jacreg.network import (
    Network,
    assemble_jacobian,
    backprop,
    forward_capture,
    jvp,
    lenet,
    load_checkpoint,
    mlp,
    save_checkpoint,
    vjp,
)
from jacreg.regularizers import (
    PowerIterState,
    RegularizerConfig,
    frobenius_penalty,
    spectral_bound_penalty,
    spectral_penalty,
    weight_decay_penalty,
)
from jacreg.trainer import (
    RunMetrics,
    TrainConfig,
    evaluate,
    fit,
    sgd_momentum_step,
    softmax_cross_entropy,
)

__all__ = [
    "BatchNorm2d",
    "CaptureError",
    "Conv2d",
    "ConvergenceError",
    "DegenerateChannelError",
    "Flatten",
    "IdxParseError",
    "Linear",
    "MaxPool2d",
    "Network",
    "PowerIterState",
    "ReLU",
    "RegularizerConfig",
    "RunMetrics",
    "ShapeError",
    "SmoothActivation",
    "TrainConfig",
    "TrainingDiverged",
    "assemble_jacobian",
    "backprop",
    "evaluate",
    "fit",
    "forward_capture",
    "frobenius_penalty",
    "jvp",
    "lenet",
    "load_checkpoint",
    "make_rng",
    "max_singular_value_dense",
    "mlp",
    "sample_unit_rows",
    "save_checkpoint",
    "sgd_momentum_step",
    "softmax_cross_entropy",
    "spectral_bound_penalty",
    "spectral_penalty",
    "vjp",
    "weight_decay_penalty",
]
