"""Minimal dense tensor engine with reverse-mode differentiation."""

from .core import ShapeError, Tape, Tensor, active_tape, backward
from .gradcheck import GradCheckReport, grad_check
from .ops import (
    add,
    as_tensor,
    batch_norm,
    cast,
    concat,
    conv2d,
    div,
    elementwise,
    exp,
    getitem,
    log,
    log_softmax,
    matmul,
    maximum,
    mean,
    minimum,
    minmax_normalize_spatial,
    mul,
    neg,
    pairwise_softmax,
    reduce,
    relu,
    reshape,
    sigmoid,
    sqrt,
    stack,
    sub,
    transpose,
)
from .ops import sum as sum_  # noqa: F401

__all__ = [
    "GradCheckReport",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "as_tensor",
    "backward",
    "batch_norm",
    "cast",
    "concat",
    "conv2d",
    "div",
    "elementwise",
    "exp",
    "getitem",
    "grad_check",
    "log",
    "log_softmax",
    "matmul",
    "maximum",
    "mean",
    "minimum",
    "minmax_normalize_spatial",
    "mul",
    "neg",
    "pairwise_softmax",
    "reduce",
    "relu",
    "reshape",
    "sigmoid",
    "sqrt",
    "stack",
    "sub",
    "transpose",
]
