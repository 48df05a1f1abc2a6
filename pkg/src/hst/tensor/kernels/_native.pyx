# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled spatial hot kernels (conv2d and bilinear resize, fwd + bwd).

Direct loops over typed memoryviews: no im2col buffer, single-threaded
so accumulation order is fixed. Semantics match kernels.fallback.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor

ctypedef fused floating:
    float
    double


cdef inline object _empty_like(floating[:, :, :, ::1] ref, tuple shape):
    if floating is float:
        return np.zeros(shape, dtype=np.float32)
    else:
        return np.zeros(shape, dtype=np.float64)


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w, int stride, int padding):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], ww = x.shape[3]
    cdef Py_ssize_t f = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t ow = (ww + 2 * padding - kw) // stride + 1
    out_arr = _empty_like(x, (b, f, oh, ow))
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ib, jf, io, jo, kc, ki, kj, row, col
    cdef floating acc
    with nogil:
        for ib in range(b):
            for jf in range(f):
                for io in range(oh):
                    for jo in range(ow):
                        acc = 0
                        for kc in range(c):
                            for ki in range(kh):
                                row = io * stride + ki - padding
                                if row < 0 or row >= h:
                                    continue
                                for kj in range(kw):
                                    col = jo * stride + kj - padding
                                    if col < 0 or col >= ww:
                                        continue
                                    acc += x[ib, kc, row, col] * w[jf, kc, ki, kj]
                        out[ib, jf, io, jo] = acc
    return out_arr


def conv2d_grad_input(floating[:, :, :, ::1] g, floating[:, :, :, ::1] w,
                      int stride, int padding, int in_h, int in_w):
    cdef Py_ssize_t b = g.shape[0], f = g.shape[1], oh = g.shape[2], ow = g.shape[3]
    cdef Py_ssize_t c = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    gx_arr = _empty_like(g, (b, c, in_h, in_w))
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t ib, jf, io, jo, kc, ki, kj, row, col
    cdef floating gval
    with nogil:
        for ib in range(b):
            for jf in range(f):
                for io in range(oh):
                    for jo in range(ow):
                        gval = g[ib, jf, io, jo]
                        for kc in range(c):
                            for ki in range(kh):
                                row = io * stride + ki - padding
                                if row < 0 or row >= in_h:
                                    continue
                                for kj in range(kw):
                                    col = jo * stride + kj - padding
                                    if col < 0 or col >= in_w:
                                        continue
                                    gx[ib, kc, row, col] += gval * w[jf, kc, ki, kj]
    return gx_arr


def conv2d_grad_weight(floating[:, :, :, ::1] g, floating[:, :, :, ::1] x,
                       int kh, int kw, int stride, int padding):
    cdef Py_ssize_t b = g.shape[0], f = g.shape[1], oh = g.shape[2], ow = g.shape[3]
    cdef Py_ssize_t c = x.shape[1], h = x.shape[2], ww = x.shape[3]
    gw_arr = _empty_like(g, (f, c, kh, kw))
    cdef floating[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t ib, jf, io, jo, kc, ki, kj, row, col
    cdef floating gval
    with nogil:
        for ib in range(b):
            for jf in range(f):
                for io in range(oh):
                    for jo in range(ow):
                        gval = g[ib, jf, io, jo]
                        for kc in range(c):
                            for ki in range(kh):
                                row = io * stride + ki - padding
                                if row < 0 or row >= h:
                                    continue
                                for kj in range(kw):
                                    col = jo * stride + kj - padding
                                    if col < 0 or col >= ww:
                                        continue
                                    gw[jf, kc, ki, kj] += gval * x[ib, kc, row, col]
    return gw_arr


cdef inline void _axis_grid(Py_ssize_t out_size, Py_ssize_t in_size,
                            Py_ssize_t* lo, Py_ssize_t* hi, double* frac) nogil:
    # Half-pixel source coordinate, clamped to the valid range.
    cdef Py_ssize_t i
    cdef double src, scale = <double>in_size / <double>out_size
    for i in range(out_size):
        src = (i + 0.5) * scale - 0.5
        if src < 0:
            src = 0
        if src > in_size - 1:
            src = in_size - 1
        lo[i] = <Py_ssize_t>floor(src)
        hi[i] = lo[i] + 1 if lo[i] + 1 < in_size else in_size - 1
        frac[i] = src - lo[i]


def bilinear_forward(floating[:, :, :, ::1] x, int out_h, int out_w):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    out_arr = _empty_like(x, (b, c, out_h, out_w))
    cdef floating[:, :, :, ::1] out = out_arr
    r0_arr = np.empty(out_h, dtype=np.intp)
    r1_arr = np.empty(out_h, dtype=np.intp)
    rf_arr = np.empty(out_h, dtype=np.float64)
    c0_arr = np.empty(out_w, dtype=np.intp)
    c1_arr = np.empty(out_w, dtype=np.intp)
    cf_arr = np.empty(out_w, dtype=np.float64)
    cdef Py_ssize_t[::1] r0 = r0_arr, r1 = r1_arr, c0 = c0_arr, c1 = c1_arr
    cdef double[::1] rf = rf_arr, cf = cf_arr
    cdef Py_ssize_t ib, ic, io, jo
    cdef double ti, tj, top, bot
    with nogil:
        _axis_grid(out_h, h, &r0[0], &r1[0], &rf[0])
        _axis_grid(out_w, w, &c0[0], &c1[0], &cf[0])
        for ib in range(b):
            for ic in range(c):
                for io in range(out_h):
                    ti = rf[io]
                    for jo in range(out_w):
                        tj = cf[jo]
                        top = x[ib, ic, r0[io], c0[jo]] * (1 - tj) + x[ib, ic, r0[io], c1[jo]] * tj
                        bot = x[ib, ic, r1[io], c0[jo]] * (1 - tj) + x[ib, ic, r1[io], c1[jo]] * tj
                        out[ib, ic, io, jo] = <floating>(top * (1 - ti) + bot * ti)
    return out_arr


def bilinear_grad_input(floating[:, :, :, ::1] g, int in_h, int in_w):
    cdef Py_ssize_t b = g.shape[0], c = g.shape[1], oh = g.shape[2], ow = g.shape[3]
    gx_arr = _empty_like(g, (b, c, in_h, in_w))
    cdef floating[:, :, :, ::1] gx = gx_arr
    r0_arr = np.empty(oh, dtype=np.intp)
    r1_arr = np.empty(oh, dtype=np.intp)
    rf_arr = np.empty(oh, dtype=np.float64)
    c0_arr = np.empty(ow, dtype=np.intp)
    c1_arr = np.empty(ow, dtype=np.intp)
    cf_arr = np.empty(ow, dtype=np.float64)
    cdef Py_ssize_t[::1] r0 = r0_arr, r1 = r1_arr, c0 = c0_arr, c1 = c1_arr
    cdef double[::1] rf = rf_arr, cf = cf_arr
    cdef Py_ssize_t ib, ic, io, jo
    cdef double ti, tj, gval
    with nogil:
        _axis_grid(oh, in_h, &r0[0], &r1[0], &rf[0])
        _axis_grid(ow, in_w, &c0[0], &c1[0], &cf[0])
        for ib in range(b):
            for ic in range(c):
                for io in range(oh):
                    ti = rf[io]
                    for jo in range(ow):
                        tj = cf[jo]
                        gval = <double>g[ib, ic, io, jo]
                        gx[ib, ic, r0[io], c0[jo]] += <floating>(gval * (1 - ti) * (1 - tj))
                        gx[ib, ic, r0[io], c1[jo]] += <floating>(gval * (1 - ti) * tj)
                        gx[ib, ic, r1[io], c0[jo]] += <floating>(gval * ti * (1 - tj))
                        gx[ib, ic, r1[io], c1[jo]] += <floating>(gval * ti * tj)
    return gx_arr
