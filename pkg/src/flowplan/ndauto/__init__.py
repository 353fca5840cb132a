"""Small float64 array core with tape-based reverse-mode differentiation."""

from .adam import AdamState, adam_step
from .core import Array, Op, Tape, active_tape, as_array, backward, grad, no_grad
from .ops import (
    add,
    add_scalar,
    attention,
    broadcast_to,
    concat,
    conv1d,
    cos,
    exp,
    gelu,
    group_norm,
    index,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    norm,
    relu,
    reshape,
    scale,
    silu,
    sin,
    softmax,
    sqrt,
    square,
    stack,
    sub,
    sum,
    transpose,
    upsample_nearest,
)

__all__ = [
    "AdamState",
    "Array",
    "Op",
    "Tape",
    "active_tape",
    "adam_step",
    "add",
    "add_scalar",
    "as_array",
    "attention",
    "backward",
    "broadcast_to",
    "concat",
    "conv1d",
    "cos",
    "exp",
    "gelu",
    "grad",
    "group_norm",
    "index",
    "layer_norm",
    "linear",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "norm",
    "relu",
    "reshape",
    "scale",
    "silu",
    "sin",
    "softmax",
    "sqrt",
    "square",
    "stack",
    "sub",
    "sum",
    "transpose",
    "upsample_nearest",
]
