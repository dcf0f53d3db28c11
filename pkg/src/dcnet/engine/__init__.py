"""Minimal dense tensor engine with reverse-mode autodiff."""

from .functional import (
    activation,
    bilinear_upsample,
    celu,
    channel_offset,
    conv2d,
    cross_entropy,
    global_avg_pool,
    group_norm,
    linear,
    loss,
    mse_loss,
    relu,
)
from .tensor import (
    GraphError,
    NonFiniteError,
    Tensor,
    check_finite,
    concatenate,
    default_dtype,
    enable_grad,
    exp2,
    get_default_dtype,
    grad,
    is_grad_enabled,
    no_grad,
    ones,
    stack,
    tensor,
    zeros,
)

__all__ = [
    "Tensor", "GraphError", "NonFiniteError", "tensor", "zeros", "ones", "grad", "no_grad", "enable_grad",
    "is_grad_enabled", "default_dtype", "get_default_dtype", "check_finite", "concatenate",
    "stack", "exp2", "conv2d", "group_norm", "celu", "relu", "activation", "global_avg_pool",
    "linear", "bilinear_upsample", "cross_entropy", "mse_loss", "loss", "channel_offset",
]
