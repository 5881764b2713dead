# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels (NCHW, float64).

Signatures mirror ``hanf._kernels_py`` exactly.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cpdef Py_ssize_t out_size(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t dilation=1):
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def im2col(const double[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t dilation):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = out_size(h, k, stride, pad, dilation)
    cdef Py_ssize_t wo = out_size(w, k, stride, pad, dilation)
    cdef Py_ssize_t kk = k * k
    out_arr = np.zeros((n * ho * wo, c * kk))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, ch, oh, ow, i, j, ih, iw, row, col
    with nogil:
        for b in range(n):
            for oh in range(ho):
                for ow in range(wo):
                    row = (b * ho + oh) * wo + ow
                    for ch in range(c):
                        for i in range(k):
                            ih = oh * stride - pad + i * dilation
                            if ih < 0 or ih >= h:
                                continue
                            for j in range(k):
                                iw = ow * stride - pad + j * dilation
                                if iw < 0 or iw >= w:
                                    continue
                                col = ch * kk + i * k + j
                                out[row, col] = x[b, ch, ih, iw]
    return out_arr


def col2im(const double[:, ::1] cols, tuple x_shape, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t dilation):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t ho = out_size(h, k, stride, pad, dilation)
    cdef Py_ssize_t wo = out_size(w, k, stride, pad, dilation)
    cdef Py_ssize_t kk = k * k
    gx_arr = np.zeros((n, c, h, w))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, ch, oh, ow, i, j, ih, iw, row
    # accumulation order (i, j outermost) matches the numpy fallback
    with nogil:
        for i in range(k):
            for j in range(k):
                for b in range(n):
                    for ch in range(c):
                        for oh in range(ho):
                            ih = oh * stride - pad + i * dilation
                            if ih < 0 or ih >= h:
                                continue
                            for ow in range(wo):
                                iw = ow * stride - pad + j * dilation
                                if iw < 0 or iw >= w:
                                    continue
                                row = (b * ho + oh) * wo + ow
                                gx[b, ch, ih, iw] += cols[row, ch * kk + i * k + j]
    return gx_arr


cdef inline double _sum(const double* x, Py_ssize_t n) noexcept nogil:
    # four independent accumulators break the add dependency chain
    cdef double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0
    cdef Py_ssize_t t = 0
    while t + 4 <= n:
        a0 += x[t]
        a1 += x[t + 1]
        a2 += x[t + 2]
        a3 += x[t + 3]
        t += 4
    while t < n:
        a0 += x[t]
        t += 1
    return (a0 + a1) + (a2 + a3)


cdef inline double _dot(const double* x, const double* y, Py_ssize_t n) noexcept nogil:
    cdef double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0
    cdef Py_ssize_t t = 0
    while t + 4 <= n:
        a0 += x[t] * y[t]
        a1 += x[t + 1] * y[t + 1]
        a2 += x[t + 2] * y[t + 2]
        a3 += x[t + 3] * y[t + 3]
        t += 4
    while t < n:
        a0 += x[t] * y[t]
        t += 1
    return (a0 + a1) + (a2 + a3)


cdef inline double _sqdev(const double* x, double mu, Py_ssize_t n) noexcept nogil:
    cdef double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0, d0, d1, d2, d3
    cdef Py_ssize_t t = 0
    while t + 4 <= n:
        d0 = x[t] - mu
        d1 = x[t + 1] - mu
        d2 = x[t + 2] - mu
        d3 = x[t + 3] - mu
        a0 += d0 * d0
        a1 += d1 * d1
        a2 += d2 * d2
        a3 += d3 * d3
        t += 4
    while t < n:
        d0 = x[t] - mu
        a0 += d0 * d0
        t += 1
    return (a0 + a1) + (a2 + a3)


cdef inline void _tap_range(Py_ssize_t size, Py_ssize_t out, Py_ssize_t stride, Py_ssize_t off,
                            Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output positions o in [lo, hi) with 0 <= o * stride + off < size
    cdef Py_ssize_t a = 0, b
    if off < 0:
        a = (-off + stride - 1) // stride
    b = (size - 1 - off) // stride + 1 if size - 1 - off >= 0 else 0
    lo[0] = a
    hi[0] = min(b, out)


def depthwise_forward(const double[:, :, :, ::1] x, const double[:, :, ::1] wt, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t dilation):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t k = wt.shape[2]
    cdef Py_ssize_t ho = out_size(h, k, stride, pad, dilation)
    cdef Py_ssize_t wo = out_size(w, k, stride, pad, dilation)
    out_arr = np.zeros((n, c, max(ho, 0), max(wo, 0)))
    if ho <= 0 or wo <= 0:
        return out_arr
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, oh, i, j, ih, ow, lo, hi, off
    cdef double wv
    cdef const double* xr
    cdef double* orow
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(k):
                    for j in range(k):
                        wv = wt[ch, i, j]
                        off = j * dilation - pad
                        _tap_range(w, wo, stride, off, &lo, &hi)
                        for oh in range(ho):
                            ih = oh * stride - pad + i * dilation
                            if ih < 0 or ih >= h:
                                continue
                            xr = &x[b, ch, ih, 0]
                            orow = &out[b, ch, oh, 0]
                            if stride == 1:
                                for ow in range(lo, hi):
                                    orow[ow] += wv * xr[ow + off]
                            else:
                                for ow in range(lo, hi):
                                    orow[ow] += wv * xr[ow * stride + off]
    return out_arr


def depthwise_backward(const double[:, :, :, ::1] x, const double[:, :, ::1] wt, const double[:, :, :, ::1] g,
                       Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t dilation):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t k = wt.shape[2]
    cdef Py_ssize_t ho = g.shape[2], wo = g.shape[3]
    gx_arr = np.zeros((n, c, h, w))
    gw_arr = np.zeros((c, k, k))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, ch, oh, i, j, ih, ow, lo, hi, off
    cdef double wv, acc
    cdef const double* xr
    cdef const double* gr
    cdef double* gxr
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(k):
                    for j in range(k):
                        wv = wt[ch, i, j]
                        off = j * dilation - pad
                        _tap_range(w, wo, stride, off, &lo, &hi)
                        acc = 0.0
                        for oh in range(ho):
                            ih = oh * stride - pad + i * dilation
                            if ih < 0 or ih >= h:
                                continue
                            xr = &x[b, ch, ih, 0]
                            gxr = &gx[b, ch, ih, 0]
                            gr = &g[b, ch, oh, 0]
                            if stride == 1:
                                for ow in range(lo, hi):
                                    acc = acc + gr[ow] * xr[ow + off]
                                    gxr[ow + off] += wv * gr[ow]
                            else:
                                for ow in range(lo, hi):
                                    acc = acc + gr[ow] * xr[ow * stride + off]
                                    gxr[ow * stride + off] += wv * gr[ow]
                        gw[ch, i, j] += acc
    return gx_arr, gw_arr


def maxpool_forward(const double[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = out_size(h, k, stride, pad)
    cdef Py_ssize_t wo = out_size(w, k, stride, pad)
    out_arr = np.empty((n, c, ho, wo))
    arg_arr = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef long long[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, ch, oh, ow, ih, iw, r0, r1, c0, c1
    cdef double best, v
    cdef long long besti
    cdef const double* xp
    with nogil:
        for b in range(n):
            for ch in range(c):
                xp = &x[b, ch, 0, 0]
                for oh in range(ho):
                    r0 = oh * stride - pad
                    r1 = min(r0 + k, h)
                    r0 = max(r0, 0)
                    for ow in range(wo):
                        c0 = ow * stride - pad
                        c1 = min(c0 + k, w)
                        c0 = max(c0, 0)
                        # first maximum in row-major window order wins ties
                        besti = r0 * w + c0
                        best = xp[besti]
                        for ih in range(r0, r1):
                            for iw in range(c0, c1):
                                v = xp[ih * w + iw]
                                if v > best:
                                    best = v
                                    besti = ih * w + iw
                        out[b, ch, oh, ow] = best
                        arg[b, ch, oh, ow] = besti
    return out_arr, arg_arr


def maxpool_backward(const double[:, :, :, ::1] g, const long long[:, :, :, ::1] arg, tuple x_shape):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t ho = g.shape[2], wo = g.shape[3]
    gx_arr = np.zeros((n, c, h, w))
    cdef double[:, :, ::1] gx = gx_arr.reshape(n, c, h * w)
    cdef Py_ssize_t b, ch, oh, ow
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        gx[b, ch, arg[b, ch, oh, ow]] += g[b, ch, oh, ow]
    return gx_arr


def avgpool_forward(const double[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    # padding is excluded from the divisor
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = out_size(h, k, stride, pad)
    cdef Py_ssize_t wo = out_size(w, k, stride, pad)
    out_arr = np.empty((n, c, ho, wo))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, oh, ow, ih, iw, r0, r1, c0, c1
    cdef double acc
    cdef const double* xp
    with nogil:
        for b in range(n):
            for ch in range(c):
                xp = &x[b, ch, 0, 0]
                for oh in range(ho):
                    r0 = oh * stride - pad
                    r1 = min(r0 + k, h)
                    r0 = max(r0, 0)
                    for ow in range(wo):
                        c0 = ow * stride - pad
                        c1 = min(c0 + k, w)
                        c0 = max(c0, 0)
                        acc = 0.0
                        for ih in range(r0, r1):
                            for iw in range(c0, c1):
                                acc = acc + xp[ih * w + iw]
                        out[b, ch, oh, ow] = acc / ((r1 - r0) * (c1 - c0))
    return out_arr


def avgpool_backward(const double[:, :, :, ::1] g, tuple x_shape, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t ho = g.shape[2], wo = g.shape[3]
    gx_arr = np.zeros((n, c, h, w))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, ch, oh, ow, i, j, ih, iw, r0, r1, c0, c1
    cdef double gv
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oh in range(ho):
                    r0 = oh * stride - pad
                    r1 = min(r0 + k, h)
                    r0 = max(r0, 0)
                    for ow in range(wo):
                        c0 = ow * stride - pad
                        c1 = min(c0 + k, w)
                        c0 = max(c0, 0)
                        gv = g[b, ch, oh, ow] / ((r1 - r0) * (c1 - c0))
                        for ih in range(r0, r1):
                            for iw in range(c0, c1):
                                gx[b, ch, ih, iw] += gv
    return gx_arr


def batchnorm_forward(const double[:, :, :, ::1] x, const double[::1] gamma, const double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], hw = x.shape[2] * x.shape[3]
    cdef Py_ssize_t m = n * hw
    out_arr = np.empty((n, c, x.shape[2], x.shape[3]))
    xhat_arr = np.empty_like(out_arr)
    inv_arr = np.empty(c)
    mu_arr = np.zeros(c)
    var_arr = np.zeros(c)
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, :, :, ::1] xhat = xhat_arr
    cdef double[::1] inv = inv_arr
    cdef double[::1] mu = mu_arr
    cdef double[::1] var = var_arr
    cdef Py_ssize_t b, ch, t
    cdef double d, iv, gm, bt, mc
    cdef const double* xp
    cdef double* hp
    cdef double* op
    # every pass walks memory in storage order; per-channel striding thrashes the cache
    with nogil:
        for b in range(n):
            for ch in range(c):
                mu[ch] += _sum(&x[b, ch, 0, 0], hw)
        for ch in range(c):
            mu[ch] = mu[ch] / m
        for b in range(n):
            for ch in range(c):
                var[ch] += _sqdev(&x[b, ch, 0, 0], mu[ch], hw)
        for ch in range(c):
            inv[ch] = 1.0 / sqrt(var[ch] / m + eps)
        for b in range(n):
            for ch in range(c):
                xp = &x[b, ch, 0, 0]
                hp = &xhat[b, ch, 0, 0]
                op = &out[b, ch, 0, 0]
                mc = mu[ch]
                iv = inv[ch]
                gm = gamma[ch]
                bt = beta[ch]
                for t in range(hw):
                    d = (xp[t] - mc) * iv
                    hp[t] = d
                    op[t] = d * gm + bt
    return out_arr, xhat_arr, inv_arr


def batchnorm_backward(const double[:, :, :, ::1] g, const double[:, :, :, ::1] xhat, const double[::1] gamma,
                       const double[::1] inv):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], hw = g.shape[2] * g.shape[3]
    cdef Py_ssize_t m = n * hw
    gx_arr = np.empty((n, c, g.shape[2], g.shape[3]))
    gg_arr = np.zeros(c)
    gb_arr = np.zeros(c)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gb = gb_arr
    cdef Py_ssize_t b, ch, t
    cdef double sg, sgh, k
    cdef const double* gp
    cdef const double* hp
    cdef double* op
    with nogil:
        for b in range(n):
            for ch in range(c):
                gb[ch] += _sum(&g[b, ch, 0, 0], hw)
                gg[ch] += _dot(&g[b, ch, 0, 0], &xhat[b, ch, 0, 0], hw)
        for b in range(n):
            for ch in range(c):
                gp = &g[b, ch, 0, 0]
                hp = &xhat[b, ch, 0, 0]
                op = &gx[b, ch, 0, 0]
                k = gamma[ch] * inv[ch] / m
                sg = gb[ch]
                sgh = gg[ch]
                for t in range(hw):
                    op[t] = k * (m * gp[t] - sg - hp[t] * sgh)
    return gx_arr, gg_arr, gb_arr
