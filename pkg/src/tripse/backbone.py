"""Miniature four-stage residual CNN hosting one attention block per stage.

Layout: stem (3x3 conv, BN, ReLU) -> 4 stages of basic residual blocks, each
stage followed by its attention block -> global average pool -> linear head.
A downsampling stage starts with a stride-2 block, so attention always sits
after a stage's last block and before the next stage reduces resolution.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import attention as attn
from .tensor import (
    BatchNormState,
    ConvParams,
    FormatError,
    LinearParams,
    Module,
    ShapeError,
    Tensor,
    batchnorm2d,
    conv2d,
    global_avg_pool,
    linear,
    read_tensor,
    relu,
    write_tensor,
)

WEIGHTS_MAGIC = b"TSEW"
WEIGHTS_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class StageSpec:
    width: int
    depth: int = 1
    downsample: bool = False

    def __post_init__(self):
        if self.width < 1 or self.depth < 1:
            raise ConfigError(f"stage width and depth must be >= 1, got {self}")


@dataclass
class BackboneConfig:
    in_channels: int = 1
    num_classes: int = 7
    widths: tuple[int, ...] = (16, 32, 64, 128)
    depths: tuple[int, ...] = (1, 1, 1, 1)
    downsample: tuple[bool, ...] = (False, True, True, True)
    stem_stride: int = 1
    attention: str = "none"
    reduction: int | None = None
    kernel_size: int = 7
    input_size: tuple[int, int] = (32, 32)
    seed: int = 0
    stages: list[StageSpec] = field(init=False)

    def __post_init__(self):
        if not len(self.widths) == len(self.depths) == len(self.downsample) == 4:
            raise ConfigError("exactly four stages are required (widths, depths, downsample)")
        if self.attention not in attn.VARIANTS:
            raise ConfigError(f"unknown attention variant {self.attention!r}")
        if self.in_channels < 1 or self.num_classes < 1 or self.stem_stride < 1:
            raise ConfigError("in_channels, num_classes and stem_stride must be positive")
        self.stages = [StageSpec(w, d, bool(s)) for w, d, s in zip(self.widths, self.depths, self.downsample)]
        stride = self.stem_stride * 2 ** sum(s.downsample for s in self.stages)
        h, w = self.input_size
        if h % stride or w % stride:
            raise ConfigError(f"input size {self.input_size} not divisible by cumulative stride {stride}")

    @property
    def se_ratio(self) -> int:
        return attn.default_reduction(self.attention) if self.reduction is None else self.reduction


def stage_shapes(cfg: BackboneConfig) -> list[tuple[int, int, int]]:
    """Output (C, H, W) of each stage, i.e. the input of its attention block."""
    h, w = cfg.input_size[0] // cfg.stem_stride, cfg.input_size[1] // cfg.stem_stride
    shapes = []
    for st in cfg.stages:
        if st.downsample:
            h, w = h // 2, w // 2
        shapes.append((st.width, h, w))
    return shapes


class BasicBlock(Module):
    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator):
        self.conv1 = ConvParams(cin, cout, 3, stride, 1, bias=False, rng=rng)
        self.bn1 = BatchNormState(cout)
        self.conv2 = ConvParams(cout, cout, 3, 1, 1, bias=False, rng=rng)
        self.bn2 = BatchNormState(cout)
        self.proj = None
        self.proj_bn = None
        if stride != 1 or cin != cout:
            self.proj = ConvParams(cin, cout, 1, stride, 0, bias=False, rng=rng)
            self.proj_bn = BatchNormState(cout)

    def forward(self, x: Tensor) -> Tensor:
        out = relu(batchnorm2d(conv2d(x, self.conv1), self.bn1))
        out = batchnorm2d(conv2d(out, self.conv2), self.bn2)
        short = x if self.proj is None else batchnorm2d(conv2d(x, self.proj), self.proj_bn)
        return relu(out + short)


class Stage(Module):
    def __init__(self, cin: int, spec: StageSpec, rng: np.random.Generator):
        first = BasicBlock(cin, spec.width, 2 if spec.downsample else 1, rng)
        self.blocks = [first] + [BasicBlock(spec.width, spec.width, 1, rng) for _ in range(spec.depth - 1)]

    def forward(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


class MiniBackbone(Module):
    def __init__(self, cfg: BackboneConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        w0 = cfg.widths[0]
        self.stem = ConvParams(cfg.in_channels, w0, 3, cfg.stem_stride, 1, bias=False, rng=rng)
        self.stem_bn = BatchNormState(w0)
        cin = w0
        self.stages = []
        for spec in cfg.stages:
            self.stages.append(Stage(cin, spec, rng))
            cin = spec.width
        self.attn = [
            attn.make_attention(cfg.attention, c, h, w, cfg.se_ratio, cfg.kernel_size, rng)
            for c, h, w in stage_shapes(cfg)
        ]
        self.head = LinearParams(cin, cfg.num_classes, rng)

    def forward(self, x: Tensor, training: bool | None = None) -> Tensor:
        return forward(self, x, training)


def build(cfg: BackboneConfig) -> MiniBackbone:
    return MiniBackbone(cfg)


def forward(m: MiniBackbone, x: Tensor, training: bool | None = None) -> Tensor:
    """Logits of shape (N, num_classes). ``training`` switches every BN mode when given."""
    cfg = m.cfg
    if x.ndim != 4 or x.shape[1] != cfg.in_channels or tuple(x.shape[2:]) != tuple(cfg.input_size):
        raise ShapeError(f"expected input (N, {cfg.in_channels}, {cfg.input_size[0]}, {cfg.input_size[1]}), got {x.shape}")
    if training is not None:
        m.train(training)
    h = relu(batchnorm2d(conv2d(x, m.stem), m.stem_bn))
    for stage, blk in zip(m.stages, m.attn):
        h = attn.attention_forward(stage(h), blk)
    return linear(global_avg_pool(h), m.head)


def backbone_param_count(cfg: BackboneConfig) -> int:
    """Closed-form count of the host network without attention."""
    w0 = cfg.widths[0]
    total = cfg.in_channels * w0 * 9 + 2 * w0
    cin = w0
    for st in cfg.stages:
        for i in range(st.depth):
            a = cin if i == 0 else st.width
            c = st.width
            total += 9 * a * c + 2 * c + 9 * c * c + 2 * c
            if i == 0 and (st.downsample or a != c):
                total += a * c + 2 * c
        cin = st.width
    return total + cin * cfg.num_classes + cfg.num_classes


def attention_overhead(cfg: BackboneConfig) -> list[int]:
    return [
        attn.variant_param_count(cfg.attention, c, h, w, cfg.se_ratio, cfg.kernel_size)
        for c, h, w in stage_shapes(cfg)
    ]


def count_params(m: MiniBackbone) -> tuple[int, int]:
    """(total, attention-only) trainable scalars from the closed-form formulas."""
    extra = sum(attention_overhead(m.cfg))
    return backbone_param_count(m.cfg) + extra, extra


# ---------------------------------------------------------------------------
# checkpoints


def state_records(m: Module) -> list[tuple[str, np.ndarray]]:
    return [(n, p.data) for n, p in m.named_parameters()] + list(m.named_buffers())


def fingerprint(m: Module) -> int:
    h = hashlib.blake2b(digest_size=8)
    for name, arr in state_records(m):
        h.update(name.encode())
        h.update(b"\0")
        h.update(",".join(map(str, arr.shape)).encode())
        h.update(b"\n")
    return struct.unpack("<Q", h.digest())[0]


def write_weights(m: Module, stream):
    records = state_records(m)
    stream.write(WEIGHTS_MAGIC)
    stream.write(struct.pack("<IQI", WEIGHTS_VERSION, fingerprint(m), len(records)))
    for name, arr in records:
        raw = name.encode()
        stream.write(struct.pack("<H", len(raw)))
        stream.write(raw)
        write_tensor(stream, arr)


def save_weights(m: Module) -> bytes:
    buf = io.BytesIO()
    write_weights(m, buf)
    return buf.getvalue()


def _read(stream, n: int) -> bytes:
    raw = stream.read(n)
    if len(raw) != n:
        raise FormatError(f"truncated checkpoint: wanted {n} bytes, got {len(raw)}")
    return raw


def read_weights(m: Module, stream) -> Module:
    """Load records from ``stream`` into ``m`` in place, leaving the stream after the last record."""
    if _read(stream, 4) != WEIGHTS_MAGIC:
        raise FormatError("not a TSEW checkpoint")
    version, fp, count = struct.unpack("<IQI", _read(stream, 16))
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if fp != fingerprint(m):
        raise CheckpointError("checkpoint architecture fingerprint does not match this model")
    loaded = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _read(stream, 2))
        name = _read(stream, n).decode()
        loaded[name] = read_tensor(stream)
    params = dict(m.named_parameters())
    for name, _ in state_records(m):
        if name not in loaded:
            raise FormatError(f"checkpoint lacks record {name!r}")
        arr = loaded[name]
        if name in params:
            p = params[name]
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)
        else:
            owner, attr = _buffer_owner(m, name)
            setattr(owner, attr, np.ascontiguousarray(arr, dtype=getattr(owner, attr).dtype))
    return m


def load_weights(m: Module, data: bytes) -> Module:
    return read_weights(m, io.BytesIO(data))


def _buffer_owner(m: Module, name: str):
    path, attr = name.rsplit(".", 1) if "." in name else ("", name)
    owner = m
    for part in path.split(".") if path else ():
        owner = owner[int(part)] if isinstance(owner, list) else getattr(owner, part)
    return owner, attr
