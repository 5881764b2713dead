"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy implementations in ``_kernels_py`` are used. Setting ``HANF_PURE_PYTHON=1``
forces the numpy path.
"""
import os

from . import _kernels_py

if os.environ.get("HANF_PURE_PYTHON") == "1":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

out_size = _kernels_py.out_size
im2col = _impl.im2col
col2im = _impl.col2im
depthwise_forward = _impl.depthwise_forward
depthwise_backward = _impl.depthwise_backward
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
avgpool_forward = _impl.avgpool_forward
avgpool_backward = _impl.avgpool_backward
batchnorm_forward = _impl.batchnorm_forward
batchnorm_backward = _impl.batchnorm_backward

__all__ = [
    "BACKEND",
    "out_size",
    "im2col",
    "col2im",
    "depthwise_forward",
    "depthwise_backward",
    "maxpool_forward",
    "maxpool_backward",
    "avgpool_forward",
    "avgpool_backward",
    "batchnorm_forward",
    "batchnorm_backward",
]
