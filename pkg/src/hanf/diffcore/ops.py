"""Differentiable array operations.

Every op takes the active :class:`Tape` first. Passing ``tape=None`` runs the
forward computation without recording anything (inference).
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import kernels
from .tensor import Tape, Tensor

BN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when an op receives inputs whose shapes it cannot combine."""


def _rec(tape, kind, out, inputs, fn):
    if tape is not None:
        tape.record(kind, out, inputs, fn)
    return out


def _check_ndim(kind: str, x: Tensor, ndim: int) -> None:
    if x.data.ndim != ndim:
        raise ShapeError(f"{kind}: expected a {ndim}-d input, got shape {x.shape}")


def _c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


# -- elementwise --------------------------------------------------------------


def add(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _rec(tape, "add", Tensor(a.data + b.data), (a, b), lambda g: (g, g))


def add_n(tape: Tape | None, xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("add_n: no inputs")
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ShapeError(f"add_n: shapes {shape} and {x.shape} differ")
    total = xs[0].data.copy()
    for x in xs[1:]:
        total += x.data
    return _rec(tape, "add_n", Tensor(total), xs, lambda g: (g,) * len(xs))


def mul(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _rec(tape, "mul", Tensor(ad * bd), (a, b), lambda g: (g * bd, g * ad))


def mul_const(tape: Tape | None, x: Tensor, factor) -> Tensor:
    """Multiply by a constant scalar or broadcastable array (not differentiated)."""
    f = np.asarray(factor, dtype=np.float64)
    return _rec(tape, "mul_const", Tensor(x.data * f), (x,), lambda g: (g * f,))


def sum(tape: Tape | None, x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _rec(tape, "sum", Tensor(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(tape: Tape | None, x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _rec(tape, "mean", Tensor(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def relu(tape: Tape | None, x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return _rec(tape, "relu", Tensor(out), (x,), lambda g: (g * (out > 0),))


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape)))


# -- convolution / pooling ----------------------------------------------------


def conv2d(
    tape: Tape | None,
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    _check_ndim("conv2d", x, 4)
    n, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c or k != k2:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci} (kernel {k}x{k2})")
    ho = kernels.out_size(h, k, stride, padding, dilation)
    wo = kernels.out_size(wd, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: spatial size {h}x{wd} too small for kernel {k}, padding {padding}")
    w2 = w.data.reshape(o, -1)

    if k == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        x3 = xs.reshape(n, c, ho * wo)
        out = np.matmul(w2, x3).reshape(n, o, ho, wo)

        def fn(g):
            g3 = g.reshape(n, o, ho * wo)
            gw = np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            gxs = np.matmul(w2.T, g3).reshape(n, c, ho, wo)
            if stride == 1:
                gx = gxs
            else:
                gx = np.zeros(x.shape)
                gx[:, :, ::stride, ::stride] = gxs
            return (gx, gw) if b is None else (gx, gw, g.sum(axis=(0, 2, 3)))

    else:
        cols = kernels.im2col(_c(x.data), k, stride, padding, dilation)
        out = (cols @ w2.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

        def fn(g):
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
            gw = (g2.T @ cols).reshape(w.shape)
            gx = kernels.col2im(_c(g2 @ w2), x.shape, k, stride, padding, dilation)
            return (gx, gw) if b is None else (gx, gw, g.sum(axis=(0, 2, 3)))

    out = np.ascontiguousarray(out)
    if b is not None:
        out += b.data[None, :, None, None]
    inputs = (x, w) if b is None else (x, w, b)
    return _rec(tape, "conv2d", Tensor(out), inputs, fn)


def depthwise_conv2d(
    tape: Tape | None, x: Tensor, w: Tensor, stride: int = 1, padding: int = 0, dilation: int = 1
) -> Tensor:
    _check_ndim("depthwise_conv2d", x, 4)
    c = x.shape[1]
    if w.shape[0] != c or w.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: input has {c} channels, weight shape {w.shape}")
    k = w.shape[2]
    if kernels.out_size(min(x.shape[2:]), k, stride, padding, dilation) < 1:
        raise ShapeError(f"depthwise_conv2d: spatial size {x.shape[2:]} too small for kernel {k}")
    xd = _c(x.data)
    wk = _c(w.data.reshape(c, k, k))
    out = kernels.depthwise_forward(xd, wk, stride, padding, dilation)

    def fn(g):
        gx, gw = kernels.depthwise_backward(xd, wk, _c(g), stride, padding, dilation)
        return gx, gw.reshape(w.shape)

    return _rec(tape, "depthwise_conv2d", Tensor(out), (x, w), fn)


def max_pool2d(tape: Tape | None, x: Tensor, k: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    _check_ndim("max_pool2d", x, 4)
    if padding >= k:
        raise ShapeError(f"max_pool2d: padding {padding} must be smaller than kernel {k}")
    shape = x.shape
    out, arg = kernels.maxpool_forward(_c(x.data), k, stride, padding)
    return _rec(tape, "max_pool2d", Tensor(out), (x,), lambda g: (kernels.maxpool_backward(_c(g), arg, shape),))


def avg_pool2d(tape: Tape | None, x: Tensor, k: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Average pooling; padded positions are excluded from the divisor."""
    _check_ndim("avg_pool2d", x, 4)
    if padding >= k:
        raise ShapeError(f"avg_pool2d: padding {padding} must be smaller than kernel {k}")
    shape = x.shape
    out = kernels.avgpool_forward(_c(x.data), k, stride, padding)
    return _rec(
        tape, "avg_pool2d", Tensor(out), (x,), lambda g: (kernels.avgpool_backward(_c(g), shape, k, stride, padding),)
    )


def global_avg_pool(tape: Tape | None, x: Tensor) -> Tensor:
    _check_ndim("global_avg_pool", x, 4)
    shape = x.shape
    hw = shape[2] * shape[3]
    out = x.data.mean(axis=(2, 3))
    return _rec(
        tape,
        "global_avg_pool",
        Tensor(out),
        (x,),
        lambda g: (np.broadcast_to((g / hw)[:, :, None, None], shape).copy(),),
    )


# -- normalisation / dense ----------------------------------------------------


def batch_norm(tape: Tape | None, x: Tensor, gamma: Tensor, beta: Tensor, eps: float = BN_EPS) -> Tensor:
    """Training-mode batch norm over (N, H, W) using the current batch statistics."""
    _check_ndim("batch_norm", x, 4)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    gd = _c(gamma.data)
    out, xhat, inv = kernels.batchnorm_forward(_c(x.data), gd, _c(beta.data), eps)

    def fn(g):
        return kernels.batchnorm_backward(_c(g), xhat, gd, inv)

    return _rec(tape, "batch_norm", Tensor(out), (x, gamma, beta), fn)


def linear(tape: Tape | None, x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    _check_ndim("linear", x, 2)
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"linear: input has {x.shape[1]} features, weight expects {w.shape[1]}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def fn(g):
        grads = (g @ wd, g.T @ xd)
        return grads if b is None else grads + (g.sum(axis=0),)

    return _rec(tape, "linear", Tensor(out), (x, w) if b is None else (x, w, b), fn)


def concat(tape: Tape | None, xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = xs[0].shape
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, x.shape)) if i != axis):
            raise ShapeError(f"channel_concat: shapes {ref} and {x.shape} disagree off axis {axis}")
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=axis)
    return _rec(tape, "concat", Tensor(out), xs, lambda g: tuple(np.split(g, sizes, axis=axis)))


def softmax(tape: Tape | None, x: Tensor) -> Tensor:
    """Softmax over the last axis (max-shifted)."""
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return _rec(tape, "softmax", Tensor(y), (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def weighted_sum(tape: Tape | None, xs: Sequence[Tensor | None], weights: Tensor) -> Tensor:
    """``sum_k weights[k] * xs[k]``; a ``None`` entry stands for an all-zero term."""
    if weights.shape != (len(xs),):
        raise ShapeError(f"weighted_sum: {len(xs)} terms but weights of shape {weights.shape}")
    present = [(k, x) for k, x in enumerate(xs) if x is not None]
    if not present:
        raise ShapeError("weighted_sum: every term is zero; output shape unknown")
    shape = present[0][1].shape
    wv = weights.data
    out = np.zeros(shape)
    for k, x in present:
        if x.shape != shape:
            raise ShapeError(f"weighted_sum: term {k} has shape {x.shape}, expected {shape}")
        out += wv[k] * x.data

    def fn(g):
        gw = np.zeros(len(xs))
        grads = []
        for k, x in present:
            gw[k] = np.vdot(g, x.data)
            grads.append(wv[k] * g)
        return (*grads, gw)

    return _rec(tape, "weighted_sum", Tensor(out), (*[x for _, x in present], weights), fn)


def cross_entropy(tape: Tape | None, logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    _check_ndim("cross_entropy", logits, 2)
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy: {b} logit rows but labels of shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def fn(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (float(g) / b),)

    return _rec(tape, "cross_entropy", Tensor(loss), (logits,), fn)


def take(tape: Tape | None, x: Tensor, index: int) -> Tensor:
    """Row ``index`` of ``x`` along the first axis."""
    shape = x.shape

    def fn(g):
        gx = np.zeros(shape)
        gx[index] = g
        return (gx,)

    return _rec(tape, "take", Tensor(x.data[index].copy()), (x,), fn)
