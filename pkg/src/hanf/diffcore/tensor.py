"""Tensors and the operation tape used for reverse-mode differentiation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class Tensor:
    """Dense float64 array with an optional gradient accumulator.

    ``requires_grad`` marks a differentiable leaf (a parameter or an input we
    want gradients for). Such tensors carry a zero-initialised ``grad`` of the
    same shape. Intermediate results produced by recorded ops never hold a
    ``grad``; their adjoints live only inside :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn
    kind: str


@dataclass
class Tape:
    """Ordered record of operations; appended in execution order, so it is
    topologically sorted by construction."""

    nodes: list[_Node] = field(default_factory=list)
    _tracked: set[int] = field(default_factory=set)

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, kind: str, out: Tensor, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
        inputs = tuple(inputs)
        if any(self.tracks(t) for t in inputs):
            self.nodes.append(_Node(out, inputs, backward, kind))
            self._tracked.add(id(out))
        return out

    def __len__(self) -> int:
        return len(self.nodes)


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) through ``tape``.

    Gradients are added into ``.grad`` of every ``requires_grad`` leaf reached.
    Returns the gradients contributed by this call, keyed by leaf tensor.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    if loss.requires_grad:
        leaf_grads[loss] = np.ones_like(loss.data)

    for node in reversed(tape.nodes):
        g = adjoint.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None:
                continue
            if inp.requires_grad:
                prev = leaf_grads.get(inp)
                leaf_grads[inp] = gi.copy() if prev is None else prev + gi
            elif id(inp) in tape._tracked:
                prev = adjoint.get(id(inp))
                adjoint[id(inp)] = gi if prev is None else prev + gi

    for leaf, g in leaf_grads.items():
        leaf.grad = leaf.grad + g.reshape(leaf.shape)
    return leaf_grads
