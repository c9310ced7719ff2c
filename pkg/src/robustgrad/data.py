"""Datasets: IDX and CIFAR binary loaders, synthetic generators, normalization.

Images are always [N, C, H, W] float64 in raw [0, 1] pixel space; the
``normalization`` field records the (mean, std) convention without
applying it, since models normalize internally and attack budgets are
enforced on raw pixels.

The synthetic generators use integer geometry only (integer jitter,
Bresenham strokes, integer radial falloff), so a seed produces the same
pixels on every platform, bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .serialize import BadMagic, TruncatedFile, atomic_write_bytes

__all__ = [
    "Dataset",
    "SyntheticSpec",
    "BadRecordLength",
    "load_idx",
    "write_idx",
    "load_cifar_binary",
    "synthesize",
    "normalize",
    "denormalize",
]


class BadRecordLength(Exception):
    """A CIFAR binary file's size is not a multiple of the record size."""


@dataclass
class Dataset:
    """Immutable image classification dataset in raw pixel space."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""
    split: str = ""
    normalization: tuple | None = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(np.asarray(self.images, dtype=np.float64))
        self.labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
        self.validate()

    def validate(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N,C,H,W], got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError("labels and images disagree on N")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("raw pixels must lie in [0, 1]")
        if self.normalization is not None and np.any(np.asarray(self.normalization[1]) <= 0):
            raise ValueError("normalization std must be positive")
        return self

    def __len__(self):
        return len(self.labels)

    def subset(self, indices):
        return Dataset(self.images[indices], self.labels[indices], self.num_classes,
                       self.name, self.split, self.normalization)


def normalize(x, normalization):
    """(x - mean) / std with scalar or per-channel statistics."""
    mean, std = _stat_arrays(x, normalization)
    return (np.asarray(x, dtype=np.float64) - mean) / std


def denormalize(x, normalization):
    """Exact inverse of normalize."""
    mean, std = _stat_arrays(x, normalization)
    return np.asarray(x, dtype=np.float64) * std + mean


def _stat_arrays(x, normalization):
    mean, std = normalization
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError("normalization std must be positive")
    x = np.asarray(x)
    if mean.ndim == 1 and x.ndim >= 3:
        # per-channel stats broadcast over the trailing spatial axes
        shape = (-1,) + (1,) * 2
        mean = mean.reshape(shape)
        std = std.reshape(shape)
    return mean, std


# ---------------------------------------------------------------------------
# IDX (big-endian) files
# ---------------------------------------------------------------------------

_IDX_UBYTE = 0x08


def load_idx(images_path, labels_path=None, name="idx", split=""):
    """Read an IDX ubyte image file (and optional label file) into a Dataset.

    Images come out as [N, 1, H, W] scaled to [0, 1]. Without a label
    file all labels are zero and num_classes is 10 by MNIST convention.
    """
    images = _read_idx_array(images_path, expect_ndim=3)
    tensors = images.astype(np.float64) / 255.0
    if labels_path is not None:
        labels = _read_idx_array(labels_path, expect_ndim=1)
        if len(labels) != len(images):
            raise ValueError(f"{labels_path}: {len(labels)} labels for {len(images)} images")
        labels = labels.astype(np.int64)
    else:
        labels = np.zeros(len(images), dtype=np.int64)
    num_classes = max(10, int(labels.max()) + 1 if len(labels) else 10)
    return Dataset(tensors[:, None], labels, num_classes, name=name, split=split)


def _read_idx_array(path, expect_ndim):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4:
        raise TruncatedFile(f"{path}: shorter than the IDX magic")
    zero1, zero2, dtype, ndim = struct.unpack(">BBBB", blob[:4])
    if zero1 != 0 or zero2 != 0 or dtype != _IDX_UBYTE:
        raise BadMagic(f"{path}: not an IDX ubyte file")
    if ndim != expect_ndim:
        raise BadMagic(f"{path}: rank {ndim}, expected {expect_ndim}")
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise TruncatedFile(f"{path}: truncated dimension table")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(blob) < header + count:
        raise TruncatedFile(f"{path}: expected {count} data bytes, found {len(blob) - header}")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array):
    """Write a uint8 array as a big-endian IDX ubyte file."""
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.uint8))
    header = struct.pack(">BBBB", 0, 0, _IDX_UBYTE, arr.ndim)
    header += struct.pack(f">{arr.ndim}I", *arr.shape)
    atomic_write_bytes(path, header + arr.tobytes(order="C"))


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches
# ---------------------------------------------------------------------------

_CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixels


def load_cifar_binary(path, name="cifar10", split=""):
    """Read one CIFAR-10 binary batch: [N, 3, 32, 32] in [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) == 0 or len(blob) % _CIFAR_RECORD != 0:
        raise BadRecordLength(
            f"{path}: size {len(blob)} is not a positive multiple of {_CIFAR_RECORD}"
        )
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, 10, name=name, split=split,
                   normalization=(0.5, 0.225))


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    kind: str
    num_classes: int = 6
    image_size: int = 28
    samples: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("edge-shapes", "gaussian-blobs"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if not 2 <= self.num_classes <= 8:
            raise ValueError("num_classes must lie in [2, 8]")
        if self.image_size < 12:
            raise ValueError("image_size must be at least 12")


_SPLIT_CODES = {"train": 0, "test": 1, "val": 2}


def synthesize(spec, split="train"):
    """Deterministic synthetic dataset; split selects an independent stream."""
    code = _SPLIT_CODES.get(split)
    if code is None:
        raise ValueError(f"unknown split {split!r}")
    rng = np.random.default_rng([spec.seed, code, 2718281828])
    if spec.kind == "edge-shapes":
        images, labels = _edge_shapes(spec, rng)
    else:
        images, labels = _gaussian_blobs(spec, rng)
    return Dataset(images, labels, spec.num_classes,
                   name=f"{spec.kind}-{spec.num_classes}c{spec.image_size}",
                   split=split, normalization=(0.5, 0.225))


def _draw_line(canvas, r0, c0, r1, c1, value):
    """Bresenham segment on an integer grid, clipped to the canvas."""
    h, w = canvas.shape
    dr = abs(r1 - r0)
    dc = abs(c1 - c0)
    sr = 1 if r0 < r1 else -1
    sc = 1 if c0 < c1 else -1
    err = dr - dc
    r, c = r0, c0
    while True:
        if 0 <= r < h and 0 <= c < w:
            canvas[r, c] = value
        if r == r1 and c == c1:
            break
        e2 = 2 * err
        if e2 > -dc:
            err -= dc
            r += sr
        if e2 < dr:
            err += dr
            c += sc


def _polygon(canvas, vertices, value):
    for (r0, c0), (r1, c1) in zip(vertices, vertices[1:] + vertices[:1]):
        _draw_line(canvas, r0, c0, r1, c1, value)


def _shape_vertices(shape_id, cy, cx, r):
    """Integer stroke geometry per class; evidence lives entirely on edges."""
    if shape_id == 0:  # square outline
        return [[(cy - r, cx - r), (cy - r, cx + r), (cy + r, cx + r), (cy + r, cx - r)]]
    if shape_id == 1:  # diamond outline
        return [[(cy - r, cx), (cy, cx + r), (cy + r, cx), (cy, cx - r)]]
    if shape_id == 2:  # triangle outline
        return [[(cy - r, cx), (cy + r, cx + r), (cy + r, cx - r)]]
    if shape_id == 3:  # plus sign, two strokes
        return [[(cy - r, cx), (cy + r, cx)], [(cy, cx - r), (cy, cx + r)]]
    if shape_id == 4:  # X cross, two diagonals
        return [[(cy - r, cx - r), (cy + r, cx + r)], [(cy - r, cx + r), (cy + r, cx - r)]]
    if shape_id == 5:  # two horizontal bars
        half = max(1, r // 2)
        return [[(cy - half, cx - r), (cy - half, cx + r)],
                [(cy + half, cx - r), (cy + half, cx + r)]]
    if shape_id == 6:  # two vertical bars
        half = max(1, r // 2)
        return [[(cy - r, cx - half), (cy + r, cx - half)],
                [(cy - r, cx + half), (cy + r, cx + half)]]
    # shape 7: T shape
    return [[(cy - r, cx - r), (cy - r, cx + r)], [(cy - r, cx), (cy + r, cx)]]


def _edge_shapes(spec, rng):
    n, size, k = spec.samples, spec.image_size, spec.num_classes
    images = np.zeros((n, 1, size, size), dtype=np.float64)
    labels = rng.integers(0, k, size=n)
    margin = size // 4
    for i in range(n):
        canvas = np.zeros((size, size), dtype=np.int64)
        cy = size // 2 + int(rng.integers(-3, 4))
        cx = size // 2 + int(rng.integers(-3, 4))
        r = int(rng.integers(margin, margin + 4))
        value = int(rng.integers(160, 256))
        strokes = _shape_vertices(int(labels[i]), cy, cx, r)
        for stroke in strokes:
            if len(stroke) > 2:
                _polygon(canvas, stroke, value)
            else:
                _draw_line(canvas, *stroke[0], *stroke[1], value)
        images[i, 0] = canvas / 255.0
    return images, labels


_PALETTE = [
    (230, 40, 40), (40, 230, 40), (40, 40, 230), (230, 230, 40),
    (230, 40, 230), (40, 230, 230), (230, 140, 40), (140, 40, 230),
]


def _gaussian_blobs(spec, rng):
    """Class-colored radial blobs; integer quadratic falloff for exactness."""
    n, size, k = spec.samples, spec.image_size, spec.num_classes
    images = np.zeros((n, 3, size, size), dtype=np.float64)
    labels = rng.integers(0, k, size=n)
    rows = np.arange(size).reshape(-1, 1)
    cols = np.arange(size).reshape(1, -1)
    for i in range(n):
        cy = size // 2 + int(rng.integers(-size // 4, size // 4 + 1))
        cx = size // 2 + int(rng.integers(-size // 4, size // 4 + 1))
        r = int(rng.integers(size // 4, size // 3 + 1))
        d2 = (rows - cy) ** 2 + (cols - cx) ** 2
        # parabolic profile, integer arithmetic: 255 at center, 0 at radius
        profile = np.maximum(0, 255 - (d2 * 255) // (r * r))
        color = _PALETTE[int(labels[i])]
        for ch in range(3):
            images[i, ch] = (profile * color[ch]) // 255 / 255.0
    return images, labels
