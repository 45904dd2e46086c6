"""Minimal reverse-mode autodiff over numpy arrays."""
from .gradcheck import GradcheckReport, gradcheck, relative_error
from .ops import (
    add,
    bilinear_upsample2x,
    clamp,
    concat_channels,
    conv2d,
    frobenius_norm,
    log,
    maxpool2d,
    mul,
    pointwise,
    relu,
    scale,
    sigmoid,
    sqrt,
    sub,
    sum_all,
)
from .optim import AdamState, adam_step
from .tensor import Graph, OpRecord, Tensor, backward

__all__ = [
    "AdamState", "Graph", "GradcheckReport", "OpRecord", "Tensor",
    "adam_step", "add", "backward", "bilinear_upsample2x", "clamp", "concat_channels",
    "conv2d", "frobenius_norm", "gradcheck", "log", "maxpool2d", "mul", "pointwise",
    "relative_error", "relu", "scale", "sigmoid", "sqrt", "sub", "sum_all",
]
