"""Tensor value type with tape-based reverse-mode autodiff.

Tensors wrap a contiguous numpy array (float32 for training, float64 for the
gradient-checking shadow mode). Every differentiable op records a ``Node``
holding its parents and a backward closure; ``Tensor.backward`` walks the
tape once in reverse topological order.
"""
from __future__ import annotations

import contextlib
import copy
import io
import math
import struct
import sys
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float32
_FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True
_corrupt_backward = False


class ShapeError(ValueError):
    pass


class DegenerateBatchError(ShapeError):
    pass


class GraphError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def corrupted_backward(scale: float = 1.01):
    """Test hook: perturb the sigmoid derivative so gradient checks must fail."""
    global _corrupt_backward
    prev, _corrupt_backward = _corrupt_backward, scale
    try:
        yield
    finally:
        _corrupt_backward = prev


def check_shape(shape) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if len(dims) < 1:
        raise ShapeError("rank must be at least 1")
    if any(d < 1 for d in dims):
        raise ShapeError(f"every extent must be >= 1, got {dims}")
    if math.prod(dims) > sys.maxsize:
        raise ShapeError(f"element count of {dims} overflows the index range")
    return dims


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_TYPES else DEFAULT_DTYPE
        arr = np.ascontiguousarray(arr, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise ShapeError(f"every extent must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def backward(self):
        if self.data.size != 1:
            raise GraphError(f"backward needs a single-element root, got shape {self.shape}")
        if self.node is None:
            raise GraphError("root has no autodiff node")
        if self.node.consumed:
            raise GraphError("graph already consumed by a previous backward; rebuild it")

        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t.node
            if node is None:
                if t.requires_grad:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            if node.consumed:
                raise GraphError("graph already consumed by a previous backward; rebuild it")
            parent_grads = node.backward_fn(g)
            node.consumed = True
            node.backward_fn = None
            for parent, pg in zip(node.inputs, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self), -1.0))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is only supported by a scalar")
        return mul(self, 1.0 / other)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.inputs:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def record(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op result, attaching a tape node when needed.

    ``backward_fn`` maps the output gradient to one gradient (or None) per parent.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), backward_fn)
    return out


def _as_tensor(v, like: Tensor) -> Tensor:
    if isinstance(v, Tensor):
        return v
    return Tensor(np.asarray(v, dtype=like.dtype))


# ---------------------------------------------------------------------------
# construction


@dataclass(frozen=True)
class Normal:
    """Seeded normal fill."""

    mean: float = 0.0
    std: float = 1.0
    seed: int = 0


def tensor_new(shape, fill="zeros", requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    """Create a tensor. ``fill`` is ``"zeros"``, a constant, or a :class:`Normal`."""
    dims = check_shape(shape)
    if isinstance(fill, str):
        if fill != "zeros":
            raise ValueError(f"unknown fill {fill!r}")
        data = np.zeros(dims, dtype=dtype)
    elif isinstance(fill, Normal):
        rng = np.random.default_rng(fill.seed)
        data = (fill.mean + fill.std * rng.standard_normal(dims)).astype(dtype)
    else:
        data = np.full(dims, fill, dtype=dtype)
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# structural ops


def permute(x: Tensor, order: Sequence[int]) -> Tensor:
    order = tuple(int(o) for o in order)
    if sorted(order) != list(range(x.ndim)):
        raise ValueError(f"{order} is not a permutation of the {x.ndim} axes")
    inv = tuple(np.argsort(order))
    out = np.ascontiguousarray(x.data.transpose(order))
    return record(out, (x,), "permute", lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def inverse_permutation(order: Sequence[int]) -> tuple[int, ...]:
    return tuple(int(i) for i in np.argsort(order))


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return record(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = xs[0].shape
    axis = axis % len(ref)
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"cannot concatenate {t.shape} with {ref} along axis {axis}")
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def backward(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            grads.append(np.ascontiguousarray(g[tuple(sl)]))
        return grads

    return record(out, xs, "concat", backward)


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def ew(x: Tensor, y, kind: str) -> Tensor:
    """Elementwise ``add`` or ``mul`` with numpy broadcasting."""
    y = _as_tensor(y, x)
    try:
        out_shape = np.broadcast_shapes(x.shape, y.shape)
    except ValueError:
        raise ShapeError(f"shapes {x.shape} and {y.shape} do not broadcast") from None
    if kind == "add":
        out = x.data + y.data

        def backward(g):
            return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    elif kind == "mul":
        out = x.data * y.data
        xd, yd = x.data, y.data

        def backward(g):
            gx = _unbroadcast(g * yd, x.shape) if x.requires_grad else None
            gy = _unbroadcast(g * xd, y.shape) if y.requires_grad else None
            return gx, gy

    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    assert out.shape == out_shape
    return record(out, (x, y), kind, backward)


def add(x: Tensor, y) -> Tensor:
    return ew(x, y, "add")


def mul(x: Tensor, y) -> Tensor:
    return ew(x, y, "mul")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        mask = x.data > 0
        out = np.where(mask, x.data, x.data.dtype.type(0))
        return record(out, (x,), "relu", lambda g: (g * mask,))
    if kind == "sigmoid":
        s = _sigmoid(x.data)

        def backward(g):
            d = g * s * (1 - s)
            if _corrupt_backward:
                d = d * _corrupt_backward
            return (d,)

        return record(s, (x,), "sigmoid", backward)
    raise ValueError(f"unknown activation {kind!r}")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(1)
    return record(out, (x,), "sum", lambda g: (np.broadcast_to(g.reshape(()), x.shape).copy(),))


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype).reshape(1)
    return record(out, (x,), "mean", lambda g: (np.full(x.shape, g.reshape(()) / n, dtype=x.dtype),))


def reduce_over_axis(x: Tensor, axis: int, mode: str, keepdims: bool = False) -> Tensor:
    """Max or mean along one axis. Max routes its gradient to the first argmax."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    axis %= x.ndim
    if mode == "mean":
        n = x.shape[axis]
        out = x.data.mean(axis=axis, keepdims=keepdims)

        def backward(g):
            g = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g / x.dtype.type(n), x.shape).copy(),)

    elif mode == "max":
        idx = np.argmax(x.data, axis=axis)
        out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
        if not keepdims:
            out = np.squeeze(out, axis)

        def backward(g):
            g = g if keepdims else np.expand_dims(g, axis)
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, np.expand_dims(idx, axis), g, axis=axis)
            return (gx,)

    else:
        raise ValueError(f"unknown reduction mode {mode!r}")
    return record(np.ascontiguousarray(out), (x,), f"reduce_{mode}", backward)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    scale = x.dtype.type(1.0 / (h * w))
    return record(out, (x,), "gap",
                  lambda g: (np.broadcast_to((g * scale)[:, :, None, None], x.shape).copy(),))


# ---------------------------------------------------------------------------
# parameter containers


class Module:
    """Base for anything that owns parameters or buffers.

    Parameters are discovered from instance attributes in definition order,
    which fixes the naming used by checkpoints and fingerprints.
    """

    training = True
    _buffers: tuple[str, ...] = ()

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, (list, tuple)) and any(isinstance(m, Module) for m in v):
                # slots may be None (e.g. a stage without attention)
                for i, m in enumerate(v):
                    if isinstance(m, Module):
                        yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, v in vars(self).items():
            if isinstance(v, Tensor) and v.requires_grad:
                yield prefix + name, v
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def astype(self, dtype) -> "Module":
        """Deep copy with every parameter and buffer cast to ``dtype``."""
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in clone.modules():
            for name in m._buffers:
                setattr(m, name, getattr(m, name).astype(dtype))
        return clone

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(DEFAULT_DTYPE)


class ConvParams(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, bias: bool = True, rng: np.random.Generator | None = None):
        if min(in_channels, out_channels, kernel_size, stride) < 1 or padding < 0:
            raise ShapeError("invalid convolution geometry")
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = parameter(he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = parameter(np.zeros(out_channels, dtype=DEFAULT_DTYPE)) if bias else None
        self.stride = stride
        self.padding = padding

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[-1]

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self)


class BatchNormState(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        self.gamma = parameter(np.ones(channels, dtype=DEFAULT_DTYPE))
        self.beta = parameter(np.zeros(channels, dtype=DEFAULT_DTYPE))
        self.running_mean = np.zeros(channels, dtype=DEFAULT_DTYPE)
        self.running_var = np.ones(channels, dtype=DEFAULT_DTYPE)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self)


class LinearParams(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.weight = parameter(he_normal(rng, (out_features, in_features), in_features))
        self.bias = parameter(np.zeros(out_features, dtype=DEFAULT_DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self)


# ---------------------------------------------------------------------------
# layers


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation of an (N, C, H, W) input via patch extraction + matmul."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    oc, ic, k, _ = p.weight.shape
    if c != ic:
        raise ShapeError(f"input has {c} channels, kernel expects {ic}")
    s, pad = p.stride, p.padding
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(f"spatial size {(h, w)} too small for kernel {k} with padding {pad}")
    oh, ow = (h + 2 * pad - k) // s + 1, (w + 2 * pad - k) // s + 1
    dtype = np.result_type(x.dtype, p.weight.dtype)
    cols = kernels.im2col(x.data.astype(dtype, copy=False), k, s, pad)
    w2 = p.weight.data.reshape(oc, -1).astype(dtype, copy=False)
    out = np.matmul(w2, cols)
    if p.bias is not None:
        out += p.bias.data.astype(dtype, copy=False)[:, None]
    out = out.reshape(n, oc, oh, ow)
    parents = (x, p.weight) + ((p.bias,) if p.bias is not None else ())

    def backward(g):
        g2 = g.reshape(n, oc, oh * ow)
        gw = None
        if p.weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(p.weight.shape)
        gx = None
        if x.requires_grad:
            gx = kernels.col2im(np.matmul(w2.T, g2), c, h, w, k, s, pad)
        grads = [gx, gw]
        if p.bias is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return grads

    return record(out, parents, "conv2d", backward)


def batchnorm2d(x: Tensor, s: BatchNormState) -> Tensor:
    """Per-channel normalisation; batch statistics in training mode, running ones in eval."""
    n, c, h, w = x.shape
    if c != s.gamma.shape[0]:
        raise ShapeError(f"input has {c} channels, batch norm tracks {s.gamma.shape[0]}")
    gamma = s.gamma.data[None, :, None, None]
    beta = s.beta.data[None, :, None, None]
    if s.training:
        m = n * h * w
        if m == 1:
            raise DegenerateBatchError("batch norm in training mode needs more than one value per channel")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + s.eps)
        xhat = xc * inv_std
        mom = s.momentum
        s.running_mean = ((1 - mom) * s.running_mean + mom * mu.reshape(c)).astype(s.running_mean.dtype)
        unbiased = var.reshape(c) * (m / (m - 1))
        s.running_var = ((1 - mom) * s.running_var + mom * unbiased).astype(s.running_var.dtype)

        def backward(g):
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gb = g.sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                gxhat = g * gamma
                gx = inv_std * (gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                                - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            return gx, gg, gb
    else:
        mu = s.running_mean[None, :, None, None]
        inv_std = 1.0 / np.sqrt(s.running_var[None, :, None, None] + s.eps)
        xhat = (x.data - mu) * inv_std

        def backward(g):
            gx = g * gamma * inv_std if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = (gamma * xhat + beta).astype(np.result_type(x.dtype, s.gamma.dtype), copy=False)
    return record(out, (x, s.gamma, s.beta), "batchnorm2d", backward)


def linear(x: Tensor, p: LinearParams) -> Tensor:
    if x.ndim != 2 or x.shape[1] != p.weight.shape[1]:
        raise ShapeError(f"linear expects (N, {p.weight.shape[1]}), got {x.shape}")
    wd = p.weight.data
    out = x.data @ wd.T + p.bias.data
    xd = x.data

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        return gx, g.T @ xd, g.sum(axis=0)

    return record(out, (x, p.weight, p.bias), "linear", backward)


# ---------------------------------------------------------------------------
# serialization

TENSOR_MAGIC = b"TSR1"


def write_tensor(stream, arr: np.ndarray):
    arr = np.asarray(arr)
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<I", arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(stream, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated stream: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(stream) -> np.ndarray:
    if _read_exact(stream, 4) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    (rank,) = struct.unpack("<I", _read_exact(stream, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank))
    count = math.prod(dims)
    raw = _read_exact(stream, 4 * count)
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)


def tensor_to_bytes(arr) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr.data if isinstance(arr, Tensor) else arr)
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(raw))


# ---------------------------------------------------------------------------
# gradient checking


def rel_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def finite_diff_errors(f: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-6) -> list[float]:
    """Max relative error between autodiff and central differences, per tensor.

    ``f`` must be a deterministic scalar function of the tensors' current data
    (use eval-mode batch norm). The tensors are perturbed in place and restored.
    """
    for t in tensors:
        t.grad = None
    root = f()
    root.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    errors = []
    with no_grad():
        for t, a in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            numeric = np.empty(flat.size, dtype=np.float64)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2 * eps)
            errors.append(float(rel_error(a.reshape(-1).astype(np.float64), numeric).max()))
    return errors


def finite_diff_check(f: Callable[[], Tensor], x: Tensor | Iterable[Tensor], eps: float = 1e-6) -> float:
    tensors = [x] if isinstance(x, Tensor) else list(x)
    return max(finite_diff_errors(f, tensors, eps))
