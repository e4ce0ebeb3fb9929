"""Pure numpy implementations of the compiled kernels in ``_kernels.pyx``.

Every function here reproduces the compiled version bit for bit: reductions
accumulate in the same order and in the input dtype.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    oh, ow = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # (n, c, oh, ow, ki, kj) -> (n, c, ki, kj, oh, ow)
    cols = win.transpose(0, 1, 4, 5, 2, 3)
    return np.ascontiguousarray(cols).reshape(n, c * k * k, oh * ow)


def col2im(cols, chans, h, w, k, stride, pad):
    n = cols.shape[0]
    oh, ow = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    padded = np.zeros((n, chans, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    blocks = cols.reshape(n, chans, k, k, oh, ow)
    for ki in range(k):
        for kj in range(k):
            padded[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += blocks[:, :, ki, kj]
    return np.ascontiguousarray(padded[:, :, pad:pad + h, pad:pad + w])


def zpool_forward(x):
    depth = x.shape[1]
    best = x[:, 0].copy()
    acc = x[:, 0].copy()
    arg = np.zeros(best.shape, dtype=np.int64)
    for d in range(1, depth):
        v = x[:, d]
        better = v > best
        best = np.where(better, v, best)
        arg[better] = d
        acc += v
    out = np.empty((x.shape[0], 2) + x.shape[2:], dtype=x.dtype)
    out[:, 0] = best
    out[:, 1] = acc / x.dtype.type(depth)
    return out, arg


def zpool_backward(grad_out, argmax, depth):
    n, _, a, b = grad_out.shape
    share = grad_out[:, 1] / grad_out.dtype.type(depth)
    gx = np.repeat(share[:, None], depth, axis=1)
    nn, ii, jj = np.meshgrid(np.arange(n), np.arange(a), np.arange(b), indexing="ij")
    gx[nn, argmax, ii, jj] += grad_out[:, 0]
    return gx
