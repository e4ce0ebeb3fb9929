"""Backend selection for the hot loops.

The compiled extension is used when it imports cleanly; setting
``TRIPSE_PURE_PYTHON=1`` forces the numpy fallback. Both backends expose the
same four functions and agree bitwise.
"""
import os

import numpy as np

from . import _kernels_py

BACKENDS = {"python": _kernels_py}

try:
    from . import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None
else:
    BACKENDS["cython"] = _kernels_c

if _kernels_c is not None and os.environ.get("TRIPSE_PURE_PYTHON", "") in ("", "0"):
    BACKEND = "cython"
else:
    BACKEND = "python"

_active = BACKENDS[BACKEND]


def use_backend(name):
    """Switch the active kernel backend; returns the previous name."""
    global BACKEND, _active
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}")
    prev, BACKEND, _active = BACKEND, name, BACKENDS[name]
    return prev


def im2col(x, k, stride, pad):
    return _active.im2col(np.ascontiguousarray(x), k, stride, pad)


def col2im(cols, chans, h, w, k, stride, pad):
    return _active.col2im(np.ascontiguousarray(cols), chans, h, w, k, stride, pad)


def zpool_forward(x):
    return _active.zpool_forward(np.ascontiguousarray(x))


def zpool_backward(grad_out, argmax, depth):
    return _active.zpool_backward(np.ascontiguousarray(grad_out), np.ascontiguousarray(argmax), depth)
