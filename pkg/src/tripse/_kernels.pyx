# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: patch extraction for convolution and channel Z-pooling.

Accumulation order matches ``_kernels_py`` exactly so both backends are
bitwise interchangeable.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


cdef inline void col_range(Py_ssize_t kj, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t w, Py_ssize_t ow,
                           Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output columns j with 0 <= j * stride + kj - pad < w
    cdef Py_ssize_t a = pad - kj, b = w - 1 + pad - kj
    lo[0] = 0 if a <= 0 else (a + stride - 1) // stride
    hi[0] = 0 if b < 0 else b // stride + 1
    if hi[0] > ow:
        hi[0] = ow
    if lo[0] > hi[0]:
        lo[0] = hi[0]


def im2col(floating[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n_batch = x.shape[0], chans = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n_batch, chans * k * k, oh * ow), dtype=dtype)
    cdef floating[:, :, ::1] cols = out
    cdef Py_ssize_t n, c, ki, kj, i, j, row, yy, j_lo, j_hi
    with nogil:
        for n in range(n_batch):
            for c in range(chans):
                for ki in range(k):
                    for kj in range(k):
                        row = (c * k + ki) * k + kj
                        col_range(kj, stride, pad, w, ow, &j_lo, &j_hi)
                        for i in range(oh):
                            yy = i * stride + ki - pad
                            if yy < 0 or yy >= h:
                                continue
                            for j in range(j_lo, j_hi):
                                cols[n, row, i * ow + j] = x[n, c, yy, j * stride + kj - pad]
    return out


def col2im(floating[:, :, ::1] cols, Py_ssize_t chans, Py_ssize_t h, Py_ssize_t w,
           Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n_batch = cols.shape[0]
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n_batch, chans, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, c, ki, kj, i, j, row, yy, j_lo, j_hi
    with nogil:
        for n in range(n_batch):
            for c in range(chans):
                for ki in range(k):
                    for kj in range(k):
                        row = (c * k + ki) * k + kj
                        col_range(kj, stride, pad, w, ow, &j_lo, &j_hi)
                        for i in range(oh):
                            yy = i * stride + ki - pad
                            if yy < 0 or yy >= h:
                                continue
                            for j in range(j_lo, j_hi):
                                dx[n, c, yy, j * stride + kj - pad] += cols[n, row, i * ow + j]
    return out


def zpool_forward(floating[:, :, :, ::1] x):
    cdef Py_ssize_t n_batch = x.shape[0], depth = x.shape[1], a = x.shape[2], b = x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n_batch, 2, a, b), dtype=dtype)
    idx = np.empty((n_batch, a, b), dtype=np.int64)
    cdef floating[:, :, :, ::1] o = out
    cdef cnp.int64_t[:, :, ::1] arg = idx
    cdef Py_ssize_t n, d, i, j
    cdef cnp.int64_t best_d
    cdef floating v, best, acc
    with nogil:
        for n in range(n_batch):
            for i in range(a):
                for j in range(b):
                    best = x[n, 0, i, j]
                    acc = best
                    best_d = 0
                    for d in range(1, depth):
                        v = x[n, d, i, j]
                        if v > best:
                            best = v
                            best_d = d
                        acc = acc + v
                    o[n, 0, i, j] = best
                    o[n, 1, i, j] = acc / <floating>depth
                    arg[n, i, j] = best_d
    return out, idx


def zpool_backward(floating[:, :, :, ::1] grad_out, cnp.int64_t[:, :, ::1] argmax, Py_ssize_t depth):
    cdef Py_ssize_t n_batch = grad_out.shape[0], a = grad_out.shape[2], b = grad_out.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n_batch, depth, a, b), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = out
    cdef Py_ssize_t n, d, i, j
    cdef floating share
    with nogil:
        for n in range(n_batch):
            for i in range(a):
                for j in range(b):
                    share = grad_out[n, 1, i, j] / <floating>depth
                    for d in range(depth):
                        gx[n, d, i, j] = share
                    gx[n, argmax[n, i, j], i, j] += grad_out[n, 0, i, j]
    return out
