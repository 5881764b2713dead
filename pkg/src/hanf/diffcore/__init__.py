"""Minimal reverse-mode autodiff: tensors, a tape, ops, and SGD."""
from . import ops
from .ops import ShapeError, cross_entropy
from .optim import OptimState, clip_grad_norm, global_grad_norm, init_params, sgd_step
from .primitives import INFRA_PRIMITIVES, PRIMITIVES, forward_primitive, primitive_param_specs
from .tensor import Tape, Tensor, backward

__all__ = [
    "INFRA_PRIMITIVES",
    "PRIMITIVES",
    "OptimState",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "clip_grad_norm",
    "cross_entropy",
    "forward_primitive",
    "global_grad_norm",
    "init_params",
    "ops",
    "primitive_param_specs",
    "sgd_step",
]
