"""Deterministic toy datasets and a bit-exact IDX loader.

Generated sets are byte-reproducible under a fixed seed. The IDX reader
follows the classic big-endian layout: images carry magic 0x00000803 then
count/rows/cols and unsigned-byte pixels; labels carry magic 0x00000801
then count and unsigned-byte labels. Pixels are scaled to [0, 1] by /255.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    """File does not start with the expected magic number."""


class IdxTruncatedError(IdxFormatError):
    """File ends before its declared payload."""


class IdxCountMismatchError(IdxFormatError):
    """Image and label files declare different example counts."""


class ClassTooSmallError(ValueError):
    """A class has fewer examples than the pruning set needs."""


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.int64)
        if self.Y.size and (self.Y.min() < 0 or self.Y.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")


def gen_blobs(seed: int, n_per_class: int, num_classes: int, dim: int,
              spread: float) -> Dataset:
    """Gaussian clusters at seeded random unit-norm centers, std = spread."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    rng = Rng(seed)
    centers = rng.normal((num_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    xs, ys = [], []
    for c in range(num_classes):
        pts = centers[c][None, :] + (rng.normal((n_per_class, dim)) * spread if spread > 0
                                     else np.zeros((n_per_class, dim)))
        xs.append(pts)
        ys.append(np.full(n_per_class, c, dtype=np.int64))
    return Dataset(np.concatenate(xs), np.concatenate(ys), num_classes)


def gen_spirals(seed: int, n_per_class: int, noise: float) -> Dataset:
    """Two interleaved 2-D spirals, angle in [0, 3*pi], radial noise N(0, noise^2).

    With zero noise the points satisfy r = angle / (3*pi) exactly.
    """
    rng = Rng(seed)
    angles = np.linspace(0.0, 3.0 * np.pi, n_per_class)
    xs, ys = [], []
    for c in range(2):
        r = angles / (3.0 * np.pi)
        if noise > 0:
            r = r + rng.normal((n_per_class,)) * noise
        phi = angles + np.pi * c
        xs.append(np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1))
        ys.append(np.full(n_per_class, c, dtype=np.int64))
    return Dataset(np.concatenate(xs), np.concatenate(ys), 2)


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise IdxTruncatedError(f"{what}: expected {count} bytes, got {len(data)}")
    return data


def load_idx(images_path, labels_path) -> Dataset:
    """Bit-exact IDX reader; images come back as N x 1 x rows x cols in [0, 1]."""
    with open(images_path, "rb") as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, "images magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxMagicError(f"images file has magic 0x{magic:08x}, "
                                f"expected 0x{IDX_IMAGES_MAGIC:08x}")
        n, rows, cols = struct.unpack(">III", _read_exact(fh, 12, "images header"))
        pixels = np.frombuffer(_read_exact(fh, n * rows * cols, "images payload"),
                               dtype=np.uint8)
    with open(labels_path, "rb") as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, "labels magic"))
        if magic != IDX_LABELS_MAGIC:
            raise IdxMagicError(f"labels file has magic 0x{magic:08x}, "
                                f"expected 0x{IDX_LABELS_MAGIC:08x}")
        n_labels, = struct.unpack(">I", _read_exact(fh, 4, "labels header"))
        if n_labels != n:
            raise IdxCountMismatchError(f"images declare {n} examples, labels {n_labels}")
        labels = np.frombuffer(_read_exact(fh, n_labels, "labels payload"), dtype=np.uint8)
    x = pixels.astype(np.float64).reshape(n, 1, rows, cols) / 255.0
    y = labels.astype(np.int64)
    return Dataset(x, y, int(y.max()) + 1 if y.size else 0)


def save_idx(ds: Dataset, images_path, labels_path) -> None:
    """Inverse of load_idx for synthetic round-trip fixtures."""
    x = ds.X
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected N x 1 x rows x cols images, got {x.shape}")
    n, _, rows, cols = x.shape
    pixels = np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(ds.Y.astype(np.uint8).tobytes())


def pruning_subset(ds: Dataset, examples_per_class: int,
                   batch_size: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """First examples_per_class items of each class, label-then-index order,
    split into ceil(examples_per_class * K / batch_size) batches."""
    if examples_per_class < 1 or batch_size < 1:
        raise ValueError("examples_per_class and batch_size must be positive")
    picks = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.Y == c)
        if idx.size < examples_per_class:
            raise ClassTooSmallError(f"class {c} has {idx.size} examples, "
                                     f"need {examples_per_class}")
        picks.append(idx[:examples_per_class])
    order = np.concatenate(picks)
    x, y = ds.X[order], ds.Y[order]
    total = order.size
    n_batches = -(-total // batch_size)
    return [(x[i * batch_size:(i + 1) * batch_size],
             y[i * batch_size:(i + 1) * batch_size]) for i in range(n_batches)]


def reshape_images(ds: Dataset, shape: tuple[int, int, int]) -> Dataset:
    """View a flat N x d dataset as N x C x H x W."""
    c, h, w = shape
    if ds.X.ndim != 2 or ds.X.shape[1] != c * h * w:
        raise ValueError(f"cannot reshape {ds.X.shape} to (N, {c}, {h}, {w})")
    return Dataset(ds.X.reshape(-1, c, h, w), ds.Y, ds.num_classes)


def flatten_images(ds: Dataset) -> Dataset:
    if ds.X.ndim == 2:
        return ds
    return Dataset(ds.X.reshape(ds.X.shape[0], -1), ds.Y, ds.num_classes)
