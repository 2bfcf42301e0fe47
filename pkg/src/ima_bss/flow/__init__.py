"""Residual flows with exact log-determinants and optional triangular masks."""
from ._backend import BACKEND, available_backends, get_kernels
from .model import (
    BASE_KINDS,
    DEFAULT_BLOCKS,
    DEFAULT_COEFF,
    DEFAULT_POWER_ITERS,
    FlowModel,
    ResidualFlow,
    TriangularMaskSpec,
    apply_triangular_masks,
    default_hidden,
    even_split,
    flow_forward,
    flow_inverse,
    inverse_budget,
    load_checkpoint,
    save_checkpoint,
    spectral_normalize,
)

__all__ = [
    "BACKEND",
    "BASE_KINDS",
    "DEFAULT_BLOCKS",
    "DEFAULT_COEFF",
    "DEFAULT_POWER_ITERS",
    "FlowModel",
    "ResidualFlow",
    "TriangularMaskSpec",
    "apply_triangular_masks",
    "available_backends",
    "default_hidden",
    "even_split",
    "flow_forward",
    "flow_inverse",
    "inverse_budget",
    "get_kernels",
    "load_checkpoint",
    "save_checkpoint",
    "spectral_normalize",
]
