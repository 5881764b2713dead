"""Client-local work for one communication round.

A model is anything with ``params`` / ``arch`` dicts of Tensors, the
``get_/set_weights`` and ``get_/set_arch`` helpers, and
``forward(tape, x, training, rng)`` returning logits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..bandit import HyperparamConfig
from ..diffcore import OptimState, Tape, backward, clip_grad_norm, cross_entropy, sgd_step
from .partition import ClientShard

CLIP_NORM = 5.0


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class RoundReport:
    client_id: int
    loss_before: float
    loss_after: float
    accuracy: float  # validation accuracy after the local epoch
    weights: dict[str, np.ndarray] | None = None
    arch: dict[str, np.ndarray] | None = None
    failed: bool = False
    error: str = ""
    extras: dict = field(default_factory=dict)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """A shuffled epoch as ``ceil(n / batch_size)`` near-equal index batches."""
    return np.array_split(rng.permutation(n), max(1, math.ceil(n / batch_size)))


def evaluate(model, x: np.ndarray, y: np.ndarray, batch_size: int) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over ``(x, y)`` in fixed, unshuffled chunks."""
    total_loss, correct = 0.0, 0
    for idx in np.array_split(np.arange(len(y)), max(1, math.ceil(len(y) / batch_size))):
        logits = model.forward(None, x[idx], training=False)
        total_loss += cross_entropy(None, logits, y[idx]).item() * len(idx)
        correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
    return total_loss / len(y), correct / len(y)


def _check(loss: float, what: str) -> float:
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"non-finite {what} loss ({loss})")
    return loss


def _grad(model, x, y, rng) -> float:
    for t in model.params.values():
        t.zero_grad()
    for t in model.arch.values():
        t.zero_grad()
    tape = Tape()
    loss = cross_entropy(tape, model.forward(tape, x, training=True, rng=rng), y)
    backward(tape, loss)
    return loss.item()


def _finite_state(model) -> None:
    for name, t in (*model.params.items(), *model.arch.items()):
        if not np.isfinite(t.data).all():
            raise NonFiniteLoss(f"parameter {name} became non-finite")


def _failed(shard: ClientShard, before: float, err: Exception) -> RoundReport:
    return RoundReport(shard.client_id, before, math.nan, math.nan, failed=True, error=str(err))


def client_search_step(
    model,
    weights,
    arch,
    h: HyperparamConfig,
    shard: ClientShard,
    batch_size: int,
    rng: np.random.Generator,
    clip_norm: float = CLIP_NORM,
    before: tuple[float, float] | None = None,
) -> RoundReport:
    """One local epoch of paired weight / architecture updates.

    Per train batch: a lookahead ``w* = w - lr * g(w)``, an architecture step
    on a validation batch evaluated at ``w*``, then the real SGD step on ``w``
    under the updated architecture. ``before`` may carry an already computed
    ``(loss, accuracy)`` for the incoming model on this client's val split.
    """
    model.set_weights(weights)
    model.set_arch(arch)
    loss_before = math.nan
    params = list(model.params.values())
    arch_ts = list(model.arch.values())
    with np.errstate(all="ignore"):
        try:
            loss_before = _check(before[0] if before else evaluate(model, shard.x_val, shard.y_val, batch_size)[0], "initial")
            opt = OptimState(h.model_lr, h.momentum, h.model_weight_decay)
            train_b = batches(shard.n_train, batch_size, rng)
            val_b = batches(shard.n_val, batch_size, rng)
            for j, ti in enumerate(train_b):
                xt, yt = shard.x_train[ti], shard.y_train[ti]
                vi = val_b[j % len(val_b)]
                saved = [p.data for p in params]
                _check(_grad(model, xt, yt, rng), "train")
                clip_grad_norm(params, clip_norm)
                for p in params:
                    p.data = p.data - h.model_lr * p.grad
                _check(_grad(model, shard.x_val[vi], shard.y_val[vi], rng), "val")
                clip_grad_norm(arch_ts, clip_norm)
                for a in arch_ts:
                    a.data = a.data - h.arch_lr * (a.grad + h.arch_weight_decay * a.data)
                for p, d in zip(params, saved):
                    p.data = d
                _check(_grad(model, xt, yt, rng), "train")
                clip_grad_norm(params, clip_norm)
                sgd_step(params, opt)
            _finite_state(model)
            loss_after, acc = evaluate(model, shard.x_val, shard.y_val, batch_size)
            _check(loss_after, "final")
        except FloatingPointError as err:
            return _failed(shard, loss_before, err)
    return RoundReport(shard.client_id, loss_before, loss_after, acc, model.get_weights(), model.get_arch())


def client_eval_step(
    model,
    weights,
    h: HyperparamConfig,
    shard: ClientShard,
    batch_size: int,
    rng: np.random.Generator,
    clip_norm: float = CLIP_NORM,
    before: tuple[float, float] | None = None,
) -> RoundReport:
    """One local epoch of plain SGD (momentum, weight decay, path dropout from ``h``)."""
    model.set_weights(weights)
    model.path_dropout = h.path_dropout or 0.0
    loss_before = math.nan
    params = list(model.params.values())
    with np.errstate(all="ignore"):
        try:
            loss_before = _check(before[0] if before else evaluate(model, shard.x_val, shard.y_val, batch_size)[0], "initial")
            opt = OptimState(h.model_lr, h.momentum, h.model_weight_decay)
            for ti in batches(shard.n_train, batch_size, rng):
                _check(_grad(model, shard.x_train[ti], shard.y_train[ti], rng), "train")
                clip_grad_norm(params, clip_norm)
                sgd_step(params, opt)
            _finite_state(model)
            loss_after, acc = evaluate(model, shard.x_val, shard.y_val, batch_size)
            _check(loss_after, "final")
        except FloatingPointError as err:
            return _failed(shard, loss_before, err)
    return RoundReport(shard.client_id, loss_before, loss_after, acc, model.get_weights(), None)
