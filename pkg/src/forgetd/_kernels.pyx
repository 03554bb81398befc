# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution and pooling kernels.

Same signatures and semantics as ``forgetd._pykernels``. Loops run with the
GIL released; accumulation order is fixed so results are deterministic.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w, double[::1] b, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t ho = (h - k) // stride + 1, wo = (wd - k) // stride + 1
    out_arr = np.empty((n, o, ho, wo))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ni, oi, ci, yi, xi, ki, kj, y0, x0
    cdef double acc
    with nogil:
        for ni in range(n):
            for oi in range(o):
                for yi in range(ho):
                    y0 = yi * stride
                    for xi in range(wo):
                        x0 = xi * stride
                        acc = 0.0
                        for ci in range(c):
                            for ki in range(k):
                                for kj in range(k):
                                    acc = acc + x[ni, ci, y0 + ki, x0 + kj] * w[oi, ci, ki, kj]
                        out[ni, oi, yi, xi] = acc + b[oi]
    return out_arr


def conv2d_backward(double[:, :, :, ::1] x, double[:, :, :, ::1] w, double[:, :, :, ::1] dout, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t o = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t ho = dout.shape[2], wo = dout.shape[3]
    dx_arr = np.zeros((x.shape[0], x.shape[1], x.shape[2], x.shape[3]))
    dw_arr = np.zeros((w.shape[0], w.shape[1], w.shape[2], w.shape[3]))
    db_arr = np.zeros(o)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef Py_ssize_t ni, oi, ci, yi, xi, ki, kj, y0, x0
    cdef double g
    with nogil:
        for ni in range(n):
            for oi in range(o):
                for yi in range(ho):
                    y0 = yi * stride
                    for xi in range(wo):
                        x0 = xi * stride
                        g = dout[ni, oi, yi, xi]
                        if g == 0.0:
                            continue
                        db[oi] += g
                        for ci in range(c):
                            for ki in range(k):
                                for kj in range(k):
                                    dw[oi, ci, ki, kj] += g * x[ni, ci, y0 + ki, x0 + kj]
                                    dx[ni, ci, y0 + ki, x0 + kj] += g * w[oi, ci, ki, kj]
    return dx_arr, dw_arr, db_arr


def maxpool2d_forward(double[:, :, :, ::1] x, int window):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = x.shape[2] // window, wo = x.shape[3] // window
    out_arr = np.empty((n, c, ho, wo))
    arg_arr = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t ni, ci, yi, xi, i, j, best
    cdef double v, m
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for yi in range(ho):
                    for xi in range(wo):
                        m = x[ni, ci, yi * window, xi * window]
                        best = 0
                        for i in range(window):
                            for j in range(window):
                                v = x[ni, ci, yi * window + i, xi * window + j]
                                if v > m:
                                    m = v
                                    best = i * window + j
                        out[ni, ci, yi, xi] = m
                        arg[ni, ci, yi, xi] = best
    return out_arr, arg_arr


def maxpool2d_backward(double[:, :, :, ::1] dout, cnp.int64_t[:, :, :, ::1] arg, tuple input_shape, int window):
    dx_arr = np.zeros(input_shape)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1], ho = dout.shape[2], wo = dout.shape[3]
    cdef Py_ssize_t ni, ci, yi, xi, a
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for yi in range(ho):
                    for xi in range(wo):
                        a = arg[ni, ci, yi, xi]
                        dx[ni, ci, yi * window + a // window, xi * window + a % window] += dout[ni, ci, yi, xi]
    return dx_arr
