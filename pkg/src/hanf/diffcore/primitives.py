"""The candidate-operation catalog and a single dispatch entry point for it.

Search-space primitives (in catalog order, which is also the tie-break order
used when discretizing)::

    sep_conv_3x3  sep_conv_5x5  dil_conv_3x3  dil_conv_5x5
    max_pool_3x3  avg_pool_3x3  identity      zero

Convolutions follow ReLU -> conv -> BN; separable convolutions apply the
depthwise/pointwise pair twice. Identity with stride > 1 becomes a strided
1x1 ReLU-conv-BN projection.
"""
from __future__ import annotations

from typing import Any, Mapping, Sequence

from .. import kernels
from . import ops
from .ops import ShapeError
from .tensor import Tape, Tensor

PRIMITIVES: tuple[str, ...] = (
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
    "max_pool_3x3",
    "avg_pool_3x3",
    "identity",
    "zero",
)

INFRA_PRIMITIVES: tuple[str, ...] = (
    "conv2d",
    "batch_norm",
    "relu",
    "linear",
    "channel_concat",
    "global_avg_pool",
    "softmax",
)

_KERNEL = {"sep_conv_3x3": 3, "sep_conv_5x5": 5, "dil_conv_3x3": 3, "dil_conv_5x5": 5}

# (suffix, init kind, shape) triples; init kinds are understood by init_params
ParamSpec = tuple[str, str, tuple[int, ...]]


def _bn(prefix: str, c: int) -> list[ParamSpec]:
    return [(f"{prefix}gamma", "bn_scale", (c,)), (f"{prefix}beta", "bn_shift", (c,))]


def primitive_param_specs(kind: str, channels: int, stride: int = 1) -> list[ParamSpec]:
    """Parameter layout of a catalog primitive operating on ``channels`` maps."""
    c = channels
    if kind.startswith("sep_conv"):
        k = _KERNEL[kind]
        return [
            ("dw1", "conv", (c, 1, k, k)),
            ("pw1", "conv", (c, c, 1, 1)),
            *_bn("bn1.", c),
            ("dw2", "conv", (c, 1, k, k)),
            ("pw2", "conv", (c, c, 1, 1)),
            *_bn("bn2.", c),
        ]
    if kind.startswith("dil_conv"):
        k = _KERNEL[kind]
        return [("dw", "conv", (c, 1, k, k)), ("pw", "conv", (c, c, 1, 1)), *_bn("bn.", c)]
    if kind == "identity" and stride > 1:
        return [("proj", "conv", (c, c, 1, 1)), *_bn("bn.", c)]
    if kind in PRIMITIVES:
        return []
    raise KeyError(f"unknown primitive {kind!r}")


def _expect(kind: str, params: Sequence[Tensor], n: int) -> None:
    if len(params) != n:
        raise ShapeError(f"{kind}: expected {n} parameter tensors, got {len(params)}")


def _rcb(tape, x, w, gamma, beta, stride=1):
    return ops.batch_norm(tape, ops.conv2d(tape, ops.relu(tape, x), w, stride=stride), gamma, beta)


def forward_primitive(
    tape: Tape | None,
    kind: str,
    x: Tensor | Sequence[Tensor],
    params: Sequence[Tensor] = (),
    attrs: Mapping[str, Any] | None = None,
) -> Tensor:
    """Apply primitive ``kind`` to ``x``.

    ``attrs`` may carry ``stride`` (default 1) and, for the raw ``conv2d``,
    ``padding``/``dilation``. ``channel_concat`` takes a list of tensors.
    """
    attrs = dict(attrs or {})
    stride = int(attrs.get("stride", 1))

    if kind == "channel_concat":
        return ops.concat(tape, list(x), axis=1)
    assert isinstance(x, Tensor)

    if kind.startswith("sep_conv"):
        _expect(kind, params, 8)
        k = _KERNEL[kind]
        dw1, pw1, g1, b1, dw2, pw2, g2, b2 = params
        _check_channels(kind, x, dw1)
        h = ops.relu(tape, x)
        h = ops.depthwise_conv2d(tape, h, dw1, stride=stride, padding=k // 2)
        h = ops.batch_norm(tape, ops.conv2d(tape, h, pw1), g1, b1)
        h = ops.relu(tape, h)
        h = ops.depthwise_conv2d(tape, h, dw2, stride=1, padding=k // 2)
        return ops.batch_norm(tape, ops.conv2d(tape, h, pw2), g2, b2)
    if kind.startswith("dil_conv"):
        _expect(kind, params, 4)
        k = _KERNEL[kind]
        dw, pw, g, b = params
        _check_channels(kind, x, dw)
        h = ops.depthwise_conv2d(tape, ops.relu(tape, x), dw, stride=stride, padding=k - 1, dilation=2)
        return ops.batch_norm(tape, ops.conv2d(tape, h, pw), g, b)
    if kind == "max_pool_3x3":
        return ops.max_pool2d(tape, x, 3, stride, 1)
    if kind == "avg_pool_3x3":
        return ops.avg_pool2d(tape, x, 3, stride, 1)
    if kind == "identity":
        if stride == 1:
            return x
        _expect(kind, params, 3)
        _check_channels(kind, x, params[0])
        return _rcb(tape, x, *params, stride=stride)
    if kind == "zero":
        if x.data.ndim != 4:
            raise ShapeError(f"zero: expected a 4-d input, got shape {x.shape}")
        n, c, h, w = x.shape
        return ops.zeros((n, c, kernels.out_size(h, 1, stride, 0), kernels.out_size(w, 1, stride, 0)))

    if kind == "conv2d":
        if len(params) not in (1, 2):
            raise ShapeError(f"conv2d: expected weight [and bias], got {len(params)} tensors")
        return ops.conv2d(
            tape,
            x,
            params[0],
            params[1] if len(params) == 2 else None,
            stride=stride,
            padding=int(attrs.get("padding", 0)),
            dilation=int(attrs.get("dilation", 1)),
        )
    if kind == "batch_norm":
        _expect(kind, params, 2)
        return ops.batch_norm(tape, x, *params)
    if kind == "relu":
        return ops.relu(tape, x)
    if kind == "linear":
        if len(params) not in (1, 2):
            raise ShapeError(f"linear: expected weight [and bias], got {len(params)} tensors")
        return ops.linear(tape, x, *params)
    if kind == "global_avg_pool":
        return ops.global_avg_pool(tape, x)
    if kind == "softmax":
        return ops.softmax(tape, x)
    raise KeyError(f"unknown primitive {kind!r}")


def _check_channels(kind: str, x: Tensor, w: Tensor) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{kind}: expected NCHW input, got shape {x.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"{kind}: input has {x.shape[1]} channels but parameters expect {w.shape[0]}")
