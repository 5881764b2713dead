"""Parameter initialisation, SGD with momentum, and gradient clipping."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor


def init_params(spec: Iterable[tuple[str, str, tuple[int, ...]]], seed: int) -> list[Tensor]:
    """Create parameter tensors from ``(name, kind, shape)`` triples.

    Weights of kind ``conv``/``linear`` draw from U(-b, b) with
    ``b = sqrt(1 / fan_in)`` where fan_in is the product of all but the first
    dimension. ``bn_scale`` is ones, ``bn_shift`` and ``bias`` are zeros.
    Draws happen in list order from a single generator seeded by ``seed``.
    """
    rng = np.random.default_rng(seed)
    out = []
    for name, kind, shape in spec:
        shape = tuple(int(s) for s in shape)
        if kind in ("conv", "linear"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(1.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "bn_scale":
            data = np.ones(shape)
        elif kind in ("bn_shift", "bias"):
            data = np.zeros(shape)
        else:
            raise KeyError(f"unknown parameter kind {kind!r} for {name}")
        out.append(Tensor(data, requires_grad=True, name=name))
    return out


@dataclass
class OptimState:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    buffers: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")


def sgd_step(params: Sequence[Tensor], state: OptimState) -> None:
    """In place: ``v <- mu*v + (g + wd*w)``, ``w <- w - lr*v``."""
    for p in params:
        if p.grad is None:
            raise ValueError(f"sgd_step: parameter {p.name or p.shape} has no gradient")
        d = p.grad + state.weight_decay * p.data if state.weight_decay else p.grad
        buf = state.buffers.get(id(p))
        if buf is None:
            buf = np.zeros_like(p.data)
        buf = state.momentum * buf + d
        state.buffers[id(p)] = buf
        p.data = p.data - state.learning_rate * buf


def global_grad_norm(params: Sequence[Tensor]) -> float:
    return float(np.sqrt(np.sum([np.vdot(p.grad, p.grad) for p in params if p.grad is not None])))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the factor applied (1.0 when no clipping was needed).
    """
    norm = global_grad_norm(params)
    if not norm > max_norm:
        return 1.0
    factor = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad = p.grad * factor
    return factor
