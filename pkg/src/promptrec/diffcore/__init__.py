"""Differentiable computation core: tensors, primitives, and gradient checking."""

from .check import GradCheckReport, ParamCheck, finite_diff_check
from .registry import ParamEntry, ParameterRegistry
from .tensor import (
    DiffcoreError,
    ShapeError,
    Tensor,
    ZeroNormError,
    absval,
    add,
    assert_finite,
    concat,
    constant,
    cosine_rows,
    dropout,
    exp,
    gather_rows,
    l2_norm,
    layer_norm,
    log,
    log_sum_exp,
    masked_softmax,
    matmul,
    mul,
    no_grad,
    powc,
    relu,
    reshape,
    scale,
    select_positions,
    softmax,
    stop_gradient,
    sub,
    swapaxes,
    tanh,
    tmean,
    tsum,
)

__all__ = [
    "DiffcoreError",
    "GradCheckReport",
    "ParamCheck",
    "ParameterRegistry",
    "ParamEntry",
    "ShapeError",
    "Tensor",
    "ZeroNormError",
    "absval",
    "add",
    "assert_finite",
    "concat",
    "constant",
    "cosine_rows",
    "dropout",
    "exp",
    "finite_diff_check",
    "gather_rows",
    "l2_norm",
    "layer_norm",
    "log",
    "log_sum_exp",
    "masked_softmax",
    "matmul",
    "mul",
    "no_grad",
    "powc",
    "relu",
    "reshape",
    "scale",
    "select_positions",
    "softmax",
    "stop_gradient",
    "sub",
    "swapaxes",
    "tanh",
    "tmean",
    "tsum",
]
