"""Minimal reverse-mode differentiation engine used by the pose network."""

from inklpose.substrate import functional
from inklpose.substrate.gradcheck import GradCheckReport, grad_check
from inklpose.substrate.params import ParamRegistry
from inklpose.substrate.scan import scan_core, selective_scan
from inklpose.substrate.tensor import (
    Tensor,
    backward,
    count_flops,
    default_dtype,
    no_grad,
    precision,
    set_default_dtype,
)

__all__ = [
    "GradCheckReport",
    "ParamRegistry",
    "Tensor",
    "backward",
    "count_flops",
    "default_dtype",
    "functional",
    "grad_check",
    "no_grad",
    "precision",
    "scan_core",
    "selective_scan",
    "set_default_dtype",
]
