"""Dataset ingestion, augmentation and batching.

Images are float32 numpy arrays of shape (C, H, W) with values in [0, 1].
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from .tensor import Tensor

FER_SIZE = 48
FER_CLASSES = 7
FER_SPLITS = ("Training", "PublicTest", "PrivateTest")
FER_HEADER = ["emotion", "pixels", "Usage"]


class DataError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray
    label: int


@dataclass(frozen=True)
class AugmentConfig:
    hflip_prob: float = 0.5
    rotation_degrees: tuple[float, float] = (-30.0, 30.0)
    target_size: tuple[int, int] = (32, 32)

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0, 1]")
        lo, hi = self.rotation_degrees
        if lo > hi:
            raise ValueError("rotation range must satisfy min <= max")


# ---------------------------------------------------------------------------
# FER2013


def _parse_fer_row(row: list[str], lineno: int) -> tuple[Sample, str]:
    if len(row) != 3:
        raise DataError(f"row {lineno}: expected 3 fields, got {len(row)}")
    label_s, pixels_s, usage = row
    try:
        label = int(label_s)
    except ValueError:
        raise DataError(f"row {lineno}: emotion {label_s!r} is not an integer") from None
    if not 0 <= label < FER_CLASSES:
        raise DataError(f"row {lineno}: emotion {label} outside 0..{FER_CLASSES - 1}")
    if usage not in FER_SPLITS:
        raise DataError(f"row {lineno}: unknown Usage {usage!r}")
    parts = pixels_s.split()
    if len(parts) != FER_SIZE * FER_SIZE:
        raise DataError(f"row {lineno}: expected {FER_SIZE * FER_SIZE} pixels, got {len(parts)}")
    try:
        pix = np.array([int(p) for p in parts], dtype=np.int64)
    except ValueError:
        raise DataError(f"row {lineno}: non-integer pixel value") from None
    if pix.min() < 0 or pix.max() > 255:
        raise DataError(f"row {lineno}: pixel values must lie in 0..255")
    image = (pix.astype(np.float32) / np.float32(255.0)).reshape(1, FER_SIZE, FER_SIZE)
    return Sample(image, label), usage


def load_fer_csv(stream) -> list[tuple[Sample, str]]:
    """Parse the FER2013 CSV (``emotion,pixels,Usage``) into (sample, split) pairs.

    Row numbers in error messages count the header as row 1.
    """
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != FER_HEADER:
        raise DataError(f"row 1: expected header {','.join(FER_HEADER)!r}, got {header!r}")
    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        out.append(_parse_fer_row(row, lineno))
    return out


def fer_row(sample: Sample, usage: str) -> str:
    """Inverse of the loader for one sample."""
    pix = np.rint(sample.image.reshape(-1) * 255.0).astype(np.int64)
    return f"{sample.label},{' '.join(map(str, pix))},{usage}"


def split_counts(rows: Sequence[tuple[Sample, str]]) -> dict[str, int]:
    counts = dict.fromkeys(FER_SPLITS, 0)
    for _, tag in rows:
        counts[tag] += 1
    return counts


# ---------------------------------------------------------------------------
# synthetic data


def class_pattern(label: int, size: tuple[int, int], channels: int = 1) -> np.ndarray:
    """Concentric rings with a class-specific radial frequency.

    Rings are invariant to flips and rotations about the centre, so the
    training augmentations never change the class evidence.
    """
    h, w = size
    yy, xx = np.meshgrid(np.arange(h) - (h - 1) / 2, np.arange(w) - (w - 1) / 2, indexing="ij")
    r = np.hypot(yy, xx) / (min(h, w) / 2)
    cycles = 0.75 * (label + 1)
    base = 0.5 + 0.4 * np.cos(2 * np.pi * cycles * r)
    return np.repeat(base[None], channels, axis=0)


def synth_dataset(num_classes: int, per_class: int, size: tuple[int, int] = (32, 32), seed: int = 0,
                  noise: float = 0.1, channels: int = 1) -> list[Sample]:
    if num_classes < 2:
        raise DataError("synthetic data needs at least two classes")
    rng = np.random.default_rng(seed)
    samples = []
    for label in range(num_classes):
        base = class_pattern(label, size, channels)
        for _ in range(per_class):
            img = base + noise * rng.uniform(-1.0, 1.0, size=base.shape)
            samples.append(Sample(np.clip(img, 0.0, 1.0).astype(np.float32), label))
    return samples


# ---------------------------------------------------------------------------
# geometry


def _bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample (C, H, W) at fractional coordinates; neighbours outside the image read as 0."""
    c, h, w = img.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    ly = (ys - y0).astype(np.float64)
    lx = (xs - x0).astype(np.float64)
    out = np.zeros((c,) + ys.shape, dtype=np.float64)
    for dy, wy in ((0, 1 - ly), (1, ly)):
        for dx, wx in ((0, 1 - lx), (1, lx)):
            yi, xi = y0 + dy, x0 + dx
            ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            vals = img[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            out += np.where(ok, wy * wx, 0.0) * vals
    return out


def resize_bilinear(img: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centre bilinear resize (align_corners=False), edges clamped."""
    c, h, w = img.shape
    th, tw = target
    if (th, tw) == (h, w):
        return img.astype(np.float32, copy=True)
    sy = (np.arange(th) + 0.5) * (h / th) - 0.5
    sx = (np.arange(tw) + 0.5) * (w / tw) - 0.5
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    ys, xs = np.meshgrid(sy, sx, indexing="ij")
    return _bilinear_sample(img, ys, xs).astype(np.float32)


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, :, ::-1])


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the image centre; uncovered pixels become 0."""
    if degrees == 0:
        return img.copy()
    c, h, w = img.shape
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    # inverse map: output pixel -> source location (row axis points down)
    src_x = cos * xx - sin * yy + cx
    src_y = sin * xx + cos * yy + cy
    return _bilinear_sample(img, src_y, src_x).astype(np.float32)


def augment(s: Sample, a: AugmentConfig, rng: np.random.Generator) -> Sample:
    flip = rng.random() < a.hflip_prob
    angle = rng.uniform(*a.rotation_degrees)
    img = hflip(s.image) if flip else s.image
    img = rotate(img, angle)
    return Sample(resize_bilinear(img, a.target_size), s.label)


def prepare(samples: Sequence[Sample], target: tuple[int, int]) -> list[Sample]:
    """Eval-time pipeline: resize only."""
    return [replace(s, image=resize_bilinear(s.image, target)) for s in samples]


# ---------------------------------------------------------------------------
# batching


def epoch_order(n: int, shuffle_seed: int | None, epoch: int = 0) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def batches(samples: Sequence[Sample], batch_size: int, shuffle_seed: int | None = None,
            drop_last: bool = False, epoch: int = 0) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Yield (images (B, C, H, W), labels (B,)). The shuffle is seeded by (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if not samples:
        raise DataError("cannot batch an empty dataset")
    order = epoch_order(len(samples), shuffle_seed, epoch)
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        images = np.stack([samples[i].image for i in idx])
        labels = np.array([samples[i].label for i in idx], dtype=np.int64)
        yield Tensor(images), labels
