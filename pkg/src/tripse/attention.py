"""Attention blocks: SE, Triplet Attention and the four TripSE variants.

Every block maps (N, C, H, W) to (N, C, H, W). Triplet branches rotate the
input so that a different axis plays the channel role:

    role  permutation   rotational channel   gated plane
    c     (0, 1, 2, 3)  C                    (H, W)
    w     (0, 3, 2, 1)  W                    (H, C)
    h     (0, 2, 1, 3)  H                    (C, W)

All three permutations are involutions.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import (
    BatchNormState,
    ConvParams,
    LinearParams,
    Module,
    ShapeError,
    Tensor,
    batchnorm2d,
    conv2d,
    global_avg_pool,
    inverse_permutation,
    linear,
    permute,
    record,
    relu,
    reshape,
    sigmoid,
)

VARIANTS = ("none", "se", "ta", "tripse1", "tripse2", "tripse3", "tripse4")
BRANCH_ROLES = ("c", "w", "h")
BRANCH_PERMS = {"c": (0, 1, 2, 3), "w": (0, 3, 2, 1), "h": (0, 2, 1, 3)}
SATURATION_BIAS = 40.0


def default_reduction(variant: str) -> int:
    return 1 if variant == "tripse4" else 16


def zpool(x: Tensor) -> Tensor:
    """Stack max (channel 0) and mean (channel 1) over axis 1."""
    if x.ndim != 4:
        raise ShapeError(f"zpool expects a rank-4 input, got {x.shape}")
    depth = x.shape[1]
    out, argmax = kernels.zpool_forward(x.data)
    return record(out, (x,), "zpool", lambda g: (kernels.zpool_backward(g, argmax, depth),))


# ---------------------------------------------------------------------------
# squeeze and excitation


def se_mid(channels: int, reduction: int) -> int:
    return max(1, channels // reduction)


def se_param_count(channels: int, reduction: int) -> int:
    mid = se_mid(channels, reduction)
    return channels * mid + mid + mid * channels + channels


class SEBlock(Module):
    variant = "se"

    def __init__(self, channels: int, reduction: int = 16, rng: np.random.Generator | None = None):
        if channels < 1 or reduction < 1:
            raise ValueError("channels and reduction must be positive")
        rng = np.random.default_rng(0) if rng is None else rng
        self.channels = channels
        self.reduction = reduction
        mid = se_mid(channels, reduction)
        self.fc1 = LinearParams(channels, mid, rng)
        self.fc2 = LinearParams(mid, channels, rng)

    def excitation(self, x: Tensor) -> Tensor:
        """Pre-sigmoid channel logits, shape (N, C)."""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"SE block expects {self.channels} channels, got input {x.shape}")
        return linear(relu(linear(global_avg_pool(x), self.fc1)), self.fc2)

    def forward(self, x: Tensor) -> Tensor:
        return se_forward(x, self)[0]


def se_forward(x: Tensor, se: SEBlock) -> tuple[Tensor, Tensor]:
    """Return ``(x scaled per channel, gate)``; the gate has shape (N, C)."""
    gate = sigmoid(se.excitation(x))
    n, c = gate.shape
    return x * reshape(gate, (n, c, 1, 1)), gate


def zero_se(se: SEBlock):
    """Zero every SE weight and bias: gate 0.5, excitation logits 0."""
    for p in se.parameters():
        p.data[...] = 0


def saturate_se(se: SEBlock, bias: float = SATURATION_BIAS):
    """Drive the SE gate to 1 by zeroing weights and setting a large output bias."""
    zero_se(se)
    se.fc2.bias.data[...] = bias


# ---------------------------------------------------------------------------
# triplet attention


def branch_param_count(kernel_size: int) -> int:
    return 2 * kernel_size * kernel_size + 2


class TABranch(Module):
    def __init__(self, role: str, kernel_size: int = 7, rng: np.random.Generator | None = None):
        if role not in BRANCH_PERMS:
            raise ValueError(f"unknown branch role {role!r}")
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError("gate kernel size must be odd")
        rng = np.random.default_rng(0) if rng is None else rng
        self.role = role
        self.perm = BRANCH_PERMS[role]
        self.inv_perm = inverse_permutation(self.perm)
        self.conv = ConvParams(2, 1, kernel_size, padding=(kernel_size - 1) // 2, bias=False, rng=rng)
        self.bn = BatchNormState(1)
        # test hook: replaces the sigmoid gate with exact ones
        self.bypass = False

    @property
    def kernel_size(self) -> int:
        return self.conv.kernel_size

    def rotate(self, x: Tensor) -> Tensor:
        return x if self.role == "c" else permute(x, self.perm)

    def unrotate(self, x: Tensor) -> Tensor:
        return x if self.role == "c" else permute(x, self.inv_perm)

    def pre_gate(self, xp: Tensor) -> Tensor:
        return batchnorm2d(conv2d(zpool(xp), self.conv), self.bn)

    def gate(self, xp: Tensor) -> Tensor:
        if self.bypass:
            n, _, a, b = xp.shape
            return Tensor(np.ones((n, 1, a, b), dtype=xp.dtype))
        return sigmoid(self.pre_gate(xp))


def ta_branch_forward(x: Tensor, b: TABranch) -> tuple[Tensor, Tensor]:
    """Gate one rotated view of ``x``; returns (output, 2-D gate of shape (N, 1, A, B))."""
    xp = b.rotate(x)
    m = b.gate(xp)
    return b.unrotate(xp * m), m


def _mean3(a: Tensor, b: Tensor, c: Tensor) -> Tensor:
    return (a + b + c) / 3.0


def _make_branches(kernel_size, rng):
    return [TABranch(role, kernel_size, rng) for role in BRANCH_ROLES]


class TripletAttention(Module):
    variant = "ta"

    def __init__(self, kernel_size: int = 7, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.branches = _make_branches(kernel_size, rng)

    def forward(self, x: Tensor) -> Tensor:
        return ta_forward(x, self)


def ta_forward(x: Tensor, t: TripletAttention) -> Tensor:
    outs = [ta_branch_forward(x, b)[0] for b in t.branches]
    return _mean3(*outs)


# ---------------------------------------------------------------------------
# TripSE


class TripSEBlock(Module):
    """Triplet attention fused with squeeze-and-excitation.

    ``branch_se`` holds one SE per branch, sized to that branch's rotational
    channel count (C, W, H); ``unify_se`` acts on C after the branches merge.
    Because W and H become FC widths, the spatial size is fixed at construction.
    """

    def __init__(self, variant: str, channels: int, height: int, width: int, reduction: int | None = None,
                 kernel_size: int = 7, rng: np.random.Generator | None = None):
        if variant not in ("tripse1", "tripse2", "tripse3", "tripse4"):
            raise ValueError(f"unknown TripSE variant {variant!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        reduction = default_reduction(variant) if reduction is None else reduction
        self.variant = variant
        self.declared = (channels, height, width)
        self.reduction = reduction
        self.branches = _make_branches(kernel_size, rng)
        self.branch_se = None
        self.unify_se = None
        if variant != "tripse1":
            rot = {"c": channels, "w": width, "h": height}
            self.branch_se = [SEBlock(rot[b.role], reduction, rng) for b in self.branches]
        if variant in ("tripse1", "tripse4"):
            self.unify_se = SEBlock(channels, reduction, rng)

    def check_input(self, x: Tensor):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.declared:
            raise ShapeError(f"{self.variant} block was built for (C, H, W) = {self.declared}, got input {x.shape}")

    def forward(self, x: Tensor) -> Tensor:
        return _TRIPSE_FORWARD[self.variant](x, self)


def _require(blk: TripSEBlock, variant: str, x: Tensor):
    if blk.variant != variant:
        raise ValueError(f"expected a {variant} block, got {blk.variant}")
    blk.check_input(x)


def tripse1_forward(x: Tensor, blk: TripSEBlock) -> Tensor:
    _require(blk, "tripse1", x)
    y = _mean3(*(ta_branch_forward(x, b)[0] for b in blk.branches))
    return se_forward(y, blk.unify_se)[0]


def tripse2_forward(x: Tensor, blk: TripSEBlock) -> Tensor:
    _require(blk, "tripse2", x)
    outs = []
    for b, se in zip(blk.branches, blk.branch_se):
        xs = se_forward(b.rotate(x), se)[0]
        outs.append(b.unrotate(xs * b.gate(xs)))
    return _mean3(*outs)


def tripse3_forward(x: Tensor, blk: TripSEBlock) -> Tensor:
    _require(blk, "tripse3", x)
    outs = []
    for b, se in zip(blk.branches, blk.branch_se):
        xp = b.rotate(x)
        g = sigmoid(se.excitation(xp))
        n, d = g.shape
        t = xp * b.gate(xp)
        outs.append(b.unrotate(t * reshape(g, (n, d, 1, 1))))
    return _mean3(*outs)


def tripse4_forward(x: Tensor, blk: TripSEBlock) -> Tensor:
    _require(blk, "tripse4", x)
    outs = []
    for b, se in zip(blk.branches, blk.branch_se):
        xp = b.rotate(x)
        plane = b.pre_gate(xp)
        v = se.excitation(xp)
        n, d = v.shape
        gate3d = sigmoid(plane + reshape(v, (n, d, 1, 1)))
        outs.append(b.unrotate(xp * gate3d))
    return se_forward(_mean3(*outs), blk.unify_se)[0]


_TRIPSE_FORWARD = {
    "tripse1": tripse1_forward,
    "tripse2": tripse2_forward,
    "tripse3": tripse3_forward,
    "tripse4": tripse4_forward,
}


# ---------------------------------------------------------------------------
# construction and accounting


def make_attention(variant: str, channels: int, height: int, width: int, reduction: int | None = None,
                   kernel_size: int = 7, rng: np.random.Generator | None = None):
    """Build one block for a stage output of shape (C, H, W); ``None`` for variant ``none``."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown attention variant {variant!r}; choose from {VARIANTS}")
    reduction = default_reduction(variant) if reduction is None else reduction
    if variant == "none":
        return None
    if variant == "se":
        return SEBlock(channels, reduction, rng)
    if variant == "ta":
        return TripletAttention(kernel_size, rng)
    return TripSEBlock(variant, channels, height, width, reduction, kernel_size, rng)


def variant_param_count(variant: str, channels: int, height: int, width: int,
                        reduction: int | None = None, kernel_size: int = 7) -> int:
    """Closed-form trainable-scalar count of one block (running statistics excluded)."""
    reduction = default_reduction(variant) if reduction is None else reduction
    if variant == "none":
        return 0
    if variant == "se":
        return se_param_count(channels, reduction)
    total = 3 * branch_param_count(kernel_size)
    if variant in ("tripse2", "tripse3", "tripse4"):
        total += sum(se_param_count(d, reduction) for d in (channels, width, height))
    if variant in ("tripse1", "tripse4"):
        total += se_param_count(channels, reduction)
    return total


def attention_param_count(blk) -> int:
    if blk is None:
        return 0
    if isinstance(blk, SEBlock):
        return se_param_count(blk.channels, blk.reduction)
    if isinstance(blk, TripletAttention):
        return 3 * branch_param_count(blk.branches[0].kernel_size)
    c, h, w = blk.declared
    return variant_param_count(blk.variant, c, h, w, blk.reduction, blk.branches[0].kernel_size)


def attention_forward(x: Tensor, blk) -> Tensor:
    return x if blk is None else blk(x)


def set_bypass(blk, on: bool = True):
    """Force every triplet-branch gate in ``blk`` to exactly 1 (testing aid)."""
    for b in getattr(blk, "branches", ()):
        b.bypass = on
