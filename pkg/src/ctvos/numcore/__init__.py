"""Minimal dense-tensor core with reverse-mode differentiation."""

from . import ops
from ._kernels import backend
from .gradcheck import GradCheckResult, check_gradients, numerical_gradient
from .ops import (
    DimensionError,
    absolute,
    add,
    bilinear_matrix,
    clip,
    concat,
    conv2d,
    huber,
    log,
    matmul,
    mean,
    mul,
    narrow,
    relu,
    reshape,
    resize_bilinear,
    sigmoid,
    softmax,
    sub,
    take,
    tanh,
    transpose,
    upsample_nearest,
)
from .optim import AdamState, adam_step
from .tensor import (
    NonFiniteError,
    Tape,
    TapeError,
    Tensor,
    as_tensor,
    backward,
    get_dtype,
    precision,
    set_precision,
)

sum = ops.sum  # noqa: A001

__all__ = [
    "AdamState", "DimensionError", "GradCheckResult", "NonFiniteError", "Tape", "TapeError",
    "Tensor", "absolute", "adam_step", "add", "as_tensor", "backend", "backward",
    "bilinear_matrix", "check_gradients", "clip", "concat", "conv2d", "get_dtype", "huber",
    "log", "matmul", "mean", "mul", "narrow", "numerical_gradient", "ops", "precision", "relu",
    "reshape", "resize_bilinear", "set_precision", "sigmoid", "softmax", "sub", "sum", "take",
    "tanh", "transpose", "upsample_nearest",
]
