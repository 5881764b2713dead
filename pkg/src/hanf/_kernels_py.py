"""Pure numpy implementations of the hot convolution and pooling kernels.

Every function here has a twin with the same signature in the compiled
``_kernels`` extension. Inputs are C-contiguous float64 arrays in NCHW layout.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided, sliding_window_view


def out_size(size, k, stride, pad, dilation=1):
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _windows(xp, k, stride, dilation, ho, wo):
    # (N, C, Ho, Wo, k, k) strided view into the padded input
    span = dilation * (k - 1) + 1
    win = sliding_window_view(xp, (span, span), axis=(2, 3))
    return win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride, ::dilation, ::dilation]


def _pad(x, pad, value=0.0):
    if pad == 0:
        return x
    # np.pad's generic machinery dominates on the small arrays the oracles use
    n, c, h, w = x.shape
    xp = np.full((n, c, h + 2 * pad, w + 2 * pad), value)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    return xp


def im2col(x, k, stride, pad, dilation):
    n, c, h, w = x.shape
    ho, wo = out_size(h, k, stride, pad, dilation), out_size(w, k, stride, pad, dilation)
    win = _windows(_pad(x, pad), k, stride, dilation, ho, wo)
    # rows ordered (n, oh, ow); columns ordered (c, i, j) to match W.reshape(O, -1)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)


def col2im(cols, x_shape, k, stride, pad, dilation):
    n, c, h, w = x_shape
    ho, wo = out_size(h, k, stride, pad, dilation), out_size(w, k, stride, pad, dilation)
    cols = cols.reshape(n, ho, wo, c, k, k)
    gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            r0, c0 = i * dilation, j * dilation
            gxp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + w])


_SMALL = 512  # output elements


def depthwise_forward(x, w, stride, pad, dilation):
    n, c, h, wd = x.shape
    k = w.shape[-1]
    ho, wo = out_size(h, k, stride, pad, dilation), out_size(wd, k, stride, pad, dilation)
    xp = _pad(x, pad)
    if n * c * ho * wo <= _SMALL:
        # one einsum beats k*k tap updates when per-call overhead dominates
        st = xp.strides
        win = as_strided(
            xp,
            (n, c, ho, wo, k, k),
            (st[0], st[1], st[2] * stride, st[3] * stride, st[2] * dilation, st[3] * dilation),
            writeable=False,
        )
        return np.einsum("nchwij,cij->nchw", win, w)
    out = np.zeros((n, c, ho, wo))
    for i in range(k):
        for j in range(k):
            r0, c0 = i * dilation, j * dilation
            sl = xp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride]
            out += sl * w[:, i, j][None, :, None, None]
    return out


def depthwise_backward(x, w, g, stride, pad, dilation):
    n, c, h, wd = x.shape
    k = w.shape[-1]
    ho, wo = g.shape[2], g.shape[3]
    xp = _pad(x, pad)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(k):
        for j in range(k):
            r0, c0 = i * dilation, j * dilation
            rs = slice(r0, r0 + stride * (ho - 1) + 1, stride)
            cs = slice(c0, c0 + stride * (wo - 1) + 1, stride)
            gw[:, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, rs, cs])
            gxp[:, :, rs, cs] += g * w[:, i, j][None, :, None, None]
    return np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + wd]), gw


def maxpool_forward(x, k, stride, pad):
    n, c, h, w = x.shape
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    win = _windows(_pad(x, pad, -np.inf), k, stride, 1, ho, wo).reshape(n, c, ho, wo, k * k)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(arg, k)
    rows = np.arange(ho)[:, None] * stride - pad + di
    cols = np.arange(wo)[None, :] * stride - pad + dj
    return np.ascontiguousarray(out), (rows * w + cols).astype(np.int64)


def maxpool_backward(g, argidx, x_shape):
    n, c, h, w = x_shape
    base = (np.arange(n * c, dtype=np.int64) * (h * w)).reshape(n, c, 1, 1)
    flat = np.bincount((argidx + base).ravel(), weights=g.ravel(), minlength=n * c * h * w)
    return flat.reshape(x_shape)


def _pool_counts(h, w, k, stride, pad):
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    r = np.arange(ho) * stride - pad
    cc = np.arange(wo) * stride - pad
    nr = np.minimum(r + k, h) - np.maximum(r, 0)
    nc = np.minimum(cc + k, w) - np.maximum(cc, 0)
    return (nr[:, None] * nc[None, :]).astype(np.float64)


def avgpool_forward(x, k, stride, pad):
    n, c, h, w = x.shape
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    xp = _pad(x, pad)
    out = np.zeros((n, c, ho, wo))
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    return out / _pool_counts(h, w, k, stride, pad)


def avgpool_backward(g, x_shape, k, stride, pad):
    n, c, h, w = x_shape
    ho, wo = g.shape[2], g.shape[3]
    gs = g / _pool_counts(h, w, k, stride, pad)
    gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gs
    return np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + w])


def batchnorm_forward(x, gamma, beta, eps):
    """Returns (out, xhat, inv_std) with per-channel batch statistics."""
    m = x.shape[0] * x.shape[2] * x.shape[3]
    xc = x - x.mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(np.einsum("nchw,nchw->c", xc, xc) / m + eps)
    xhat = xc * inv[:, None, None]
    return xhat * gamma[:, None, None] + beta[:, None, None], xhat, inv


def batchnorm_backward(g, xhat, gamma, inv):
    m = g.shape[0] * g.shape[2] * g.shape[3]
    gbeta = g.sum(axis=(0, 2, 3))
    ggamma = np.einsum("nchw,nchw->c", g, xhat)
    k = (gamma * inv / m)[None, :, None, None]
    gx = k * (m * g - gbeta[None, :, None, None] - xhat * ggamma[None, :, None, None])
    return gx, ggamma, gbeta
