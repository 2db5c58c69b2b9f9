"""Minimal dense-tensor autodiff engine (numpy, CPU)."""

from ldgan.engine.tensor import (
    Tensor,
    apply_linear,
    backward,
    concat,
    get_default_dtype,
    grad_enabled,
    no_grad,
    set_default_dtype,
    set_nan_guard,
)
from ldgan.engine.functional import (
    BatchNormState,
    activation,
    batch_norm2d,
    batch_variance_norm,
    bce_loss,
    conv2d,
    conv_transpose2d,
    kink_trace,
    loss,
    mse_loss,
)
from ldgan.engine.optim import Adam, AdamState, adam_step
from ldgan.engine.gradcheck import finite_diff_check

__all__ = [
    "Tensor", "apply_linear", "backward", "concat", "no_grad", "grad_enabled",
    "get_default_dtype", "set_default_dtype", "set_nan_guard",
    "BatchNormState", "activation", "batch_norm2d", "batch_variance_norm",
    "bce_loss", "conv2d", "conv_transpose2d", "kink_trace", "loss", "mse_loss",
    "Adam", "AdamState", "adam_step", "finite_diff_check",
]
