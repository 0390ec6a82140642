# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled loops for the convolution kernels.

Loop order matches ``_kernels_py`` so that im2col, col2im and the depthwise
forward pass agree bitwise with the numpy fallback.
"""
import numpy as np

from cython cimport floating
from libc.string cimport memcpy


def im2col(floating[:, :, ::1] xp, Py_ssize_t k, Py_ssize_t stride,
           Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t C = xp.shape[0]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((C * k * k, ho * wo), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t c, a, b, i, j, row
    cdef floating* dst
    cdef floating* src
    with nogil:
        for c in range(C):
            for a in range(k):
                for b in range(k):
                    row = (c * k + a) * k + b
                    for i in range(ho):
                        dst = &out[row, i * wo]
                        src = &xp[c, a + i * stride, b]
                        if stride == 1:
                            memcpy(dst, src, wo * sizeof(floating))
                        else:
                            for j in range(wo):
                                dst[j] = src[j * stride]
    return out_arr


def col2im(floating[:, ::1] cols, Py_ssize_t C, Py_ssize_t hp, Py_ssize_t wp,
           Py_ssize_t k, Py_ssize_t stride, Py_ssize_t ho, Py_ssize_t wo):
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((C, hp, wp), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t c, a, b, i, j, row
    cdef floating* dst
    cdef const floating* src
    with nogil:
        for c in range(C):
            for a in range(k):
                for b in range(k):
                    row = (c * k + a) * k + b
                    for i in range(ho):
                        dst = &out[c, a + i * stride, b]
                        src = &cols[row, i * wo]
                        for j in range(wo):
                            dst[j * stride] += src[j]
    return out_arr


def dw_forward(floating[:, :, ::1] xp, floating[:, :, ::1] w, Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t C = xp.shape[0]
    cdef Py_ssize_t k = w.shape[1]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((C, ho, wo), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t c, a, b, i, j
    cdef floating wv
    with nogil:
        for c in range(C):
            for a in range(k):
                for b in range(k):
                    wv = w[c, a, b]
                    for i in range(ho):
                        for j in range(wo):
                            out[c, i, j] += wv * xp[c, i + a, j + b]
    return out_arr


def dw_backward(floating[:, :, ::1] xp, floating[:, :, ::1] w, floating[:, :, ::1] g):
    cdef Py_ssize_t C = xp.shape[0]
    cdef Py_ssize_t k = w.shape[1]
    cdef Py_ssize_t ho = g.shape[1]
    cdef Py_ssize_t wo = g.shape[2]
    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.zeros((xp.shape[0], xp.shape[1], xp.shape[2]), dtype=dtype)
    gw_arr = np.zeros((C, k, k), dtype=dtype)
    cdef floating[:, :, ::1] gx = gx_arr
    cdef floating[:, :, ::1] gw = gw_arr
    cdef Py_ssize_t c, a, b, i, j
    cdef floating wv, acc, gv
    with nogil:
        for c in range(C):
            for a in range(k):
                for b in range(k):
                    wv = w[c, a, b]
                    acc = 0
                    for i in range(ho):
                        for j in range(wo):
                            gv = g[c, i, j]
                            gx[c, i + a, j + b] += wv * gv
                            acc = acc + gv * xp[c, i + a, j + b]
                    gw[c, a, b] = acc
    return gx_arr, gw_arr
