"""Minimal dense tensor engine: numpy storage, reverse-mode autodiff,
and the convolution/attention primitives the segmentation models need."""

from .core import (
    ConfigError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    grad_enabled,
    no_grad,
    set_default_dtype,
    set_finite_checks,
    topo_order,
    using_dtype,
)
from .convkern import BACKEND as CONV_BACKEND
from . import functional

__all__ = [
    "ConfigError",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "default_dtype",
    "grad_enabled",
    "no_grad",
    "set_default_dtype",
    "set_finite_checks",
    "topo_order",
    "using_dtype",
    "functional",
    "CONV_BACKEND",
]
