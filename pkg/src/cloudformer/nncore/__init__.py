"""Minimal reverse-mode autodiff core plus transformer building blocks."""

from .tensor import (
    NonFiniteError,
    Tensor,
    backward,
    broadcast_to,
    concat,
    exp,
    layer_norm_fused,
    linear,
    log,
    log_cosh,
    no_grad,
    prepend_token,
    relu,
    scale_add_const,
    set_finite_checks,
    sigmoid,
    softmax,
    swish,
    tanh,
)
from .kernels import (
    MASK_FILL,
    attention,
    dense,
    dropout,
    layer_norm,
    multi_head_attention,
    positional_encoding,
)

__all__ = [
    "NonFiniteError", "Tensor", "backward", "broadcast_to", "concat", "exp",
    "layer_norm_fused", "linear", "log", "log_cosh", "no_grad",
    "prepend_token", "relu", "scale_add_const", "set_finite_checks",
    "sigmoid", "softmax", "swish", "tanh",
    "MASK_FILL", "attention", "dense", "dropout", "layer_norm",
    "multi_head_attention", "positional_encoding",
]
