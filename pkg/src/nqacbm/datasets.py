"""Datasets: bars-and-stripes generation, IDX digit ingestion, coarse
graining, supervised preparation, and minibatching.

Vectors are +-1 spins throughout; pixel value 1 maps to +1 ("on").
"""

from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import rng as _rng
from .errors import (
    DimensionError,
    DomainError,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncationError,
)

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CORNER_PIXELS = (0, 3, 12, 15)  # of a flattened 4x4 grid


@dataclass(frozen=True)
class BinaryDataset:
    """A fixed-width multiset of +-1 vectors with optional integer labels."""

    vectors: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        vs = np.asarray(self.vectors, dtype=np.int8)
        if vs.ndim != 2:
            raise DimensionError(f"vectors must be 2-d, got shape {vs.shape}")
        bad = np.setdiff1d(np.unique(vs), [-1, 1])
        if len(vs) and len(bad):
            raise DomainError(f"vectors must be +-1, found {bad[:4]}")
        object.__setattr__(self, "vectors", vs)
        if self.labels is not None:
            ls = np.asarray(self.labels, dtype=np.int64)
            if ls.shape != (len(vs),):
                raise DimensionError(
                    f"labels shape {ls.shape} does not align with {len(vs)} vectors"
                )
            object.__setattr__(self, "labels", ls)
        self.vectors.setflags(write=False)
        if self.labels is not None:
            self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    def subset(self, idx) -> "BinaryDataset":
        labels = None if self.labels is None else self.labels[idx]
        return BinaryDataset(vectors=self.vectors[idx], labels=labels)


@dataclass(frozen=True)
class BasSpec:
    """Side length D, number of draws S, and the generation seed."""

    D: int
    S: int
    seed: int = 0

    def __post_init__(self):
        if self.D < 2:
            raise DomainError(f"side length must be >= 2, got {self.D}")
        if self.S < 1:
            raise DomainError(f"dataset size must be >= 1, got {self.S}")


def generate_bas(spec: BasSpec) -> BinaryDataset:
    """Draw bar/stripe images: orientation coin, then one coin per row or
    column. Labels record the orientation drawn: 1 = constant rows (bars),
    2 = constant columns (stripes). Flattened row-major, width D*D."""
    gen = _rng.spawn(spec.seed, "bas", spec.D)
    d, s = spec.D, spec.S
    orient = gen.integers(0, 2, size=s)  # 0 -> rows, 1 -> columns
    coins = gen.choice(np.array([-1, 1], dtype=np.int8), size=(s, d))
    rows_imgs = np.repeat(coins, d, axis=1)  # constant rows
    cols_imgs = np.tile(coins, d)  # constant columns
    vectors = np.where(orient[:, None] == 0, rows_imgs, cols_imgs)
    return BinaryDataset(vectors=vectors, labels=orient + 1)


def ideal_bas_ll(D: int) -> float:
    """Mean log-likelihood of a perfectly distributed bar/stripe set under
    its own distribution: p0[4 ln(2 p0) + (2^(D+1) - 4) ln p0]."""
    if D < 2:
        raise DomainError(f"side length must be >= 2, got {D}")
    p0 = 2.0 ** -(D + 1)
    return p0 * (4 * math.log(2 * p0) + (2 ** (D + 1) - 4) * math.log(p0))


def bars_vs_stripes_task(d: int = 4) -> BinaryDataset:
    """Every unambiguous d x d bar/stripe image as a labeled classification
    set: corners dropped, two one-hot label bits appended.

    The two constant images satisfy both orientations and are excluded.
    Label 1 (constant rows) -> bits (+1, -1); label 2 -> (-1, +1).
    """
    patterns = 2 * ((np.arange(2**d)[:, None] >> np.arange(d)) & 1) - 1
    patterns = patterns.astype(np.int8)
    nonconst = np.abs(patterns.sum(axis=1)) != d
    rows_imgs = np.repeat(patterns[nonconst], d, axis=1)
    cols_imgs = np.tile(patterns[nonconst], d)
    imgs = np.vstack([rows_imgs, cols_imgs])
    labels = np.array([1] * len(rows_imgs) + [2] * len(cols_imgs))
    corners = [0, d - 1, d * (d - 1), d * d - 1]
    keep = np.setdiff1d(np.arange(d * d), corners)
    trimmed = imgs[:, keep]
    hot = np.where(labels[:, None] == [1, 2], 1, -1).astype(np.int8)
    return BinaryDataset(vectors=np.hstack([trimmed, hot]), labels=labels)


# -- IDX ingestion ---------------------------------------------------------------


def _read_exact(fh, n: int, offset: int, path) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise IdxTruncationError(
            f"{path}: needed {n} bytes at offset {offset}, got {len(buf)}"
        )
    return buf


def _load_idx_images(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = _read_exact(fh, 4, 0, path)
        (magic,) = struct.unpack(">i", head)
        if magic != IDX_IMAGES_MAGIC:
            raise IdxMagicError(
                f"{path}: expected image magic {IDX_IMAGES_MAGIC}, got {magic}"
            )
        dims = struct.unpack(">iii", _read_exact(fh, 12, 4, path))
        n, rows, cols = dims
        if min(dims) < 0:
            raise IdxTruncationError(f"{path}: negative dimension {dims}")
        body = _read_exact(fh, n * rows * cols, 16, path)
    return np.frombuffer(body, dtype=np.uint8).reshape(n, rows, cols)


def _load_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = _read_exact(fh, 4, 0, path)
        (magic,) = struct.unpack(">i", head)
        if magic != IDX_LABELS_MAGIC:
            raise IdxMagicError(
                f"{path}: expected label magic {IDX_LABELS_MAGIC}, got {magic}"
            )
        (n,) = struct.unpack(">i", _read_exact(fh, 4, 4, path))
        if n < 0:
            raise IdxTruncationError(f"{path}: negative count {n}")
        body = _read_exact(fh, n, 8, path)
    return np.frombuffer(body, dtype=np.uint8).astype(np.int64)


def load_mnist_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Parse a big-endian IDX image/label file pair.

    Returns (images u8 array (n, rows, cols), labels int array (n,)).
    """
    images = _load_idx_images(images_path)
    labels = _load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxCountMismatchError(
            f"{len(images)} images vs {len(labels)} labels"
        )
    return images, labels


def coarse_grain_binarize(image: np.ndarray) -> np.ndarray:
    """28x28 u8 -> 4x4 +-1 by 7x7 block mean, thresholded at 127.5.

    Accepts a single image or a batch (n, 28, 28).
    """
    arr = np.asarray(image)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (28, 28):
        raise DimensionError(f"expected (n, 28, 28) or (28, 28), got {np.asarray(image).shape}")
    means = arr.reshape(-1, 4, 7, 4, 7).mean(axis=(2, 4))
    out = np.where(means > 127.5, 1, -1).astype(np.int8)
    return out[0] if single else out


def prepare_supervised(images: np.ndarray, labels: np.ndarray) -> BinaryDataset:
    """Keep classes 1-4, drop the 4 corner pixels, append one-hot label bits.

    Images may be (n, 4, 4) or already flat (n, 16). One-hot in spins: the
    hot position is +1, the rest -1; class c occupies position c-1, so class 1
    reads (+1, -1, -1, -1). Output width 12 + 4 = 16.
    """
    imgs = np.asarray(images, dtype=np.int8)
    labs = np.asarray(labels, dtype=np.int64)
    if imgs.ndim == 3:
        if imgs.shape[1:] != (4, 4):
            raise DimensionError(f"expected (n, 4, 4), got {imgs.shape}")
        imgs = imgs.reshape(len(imgs), 16)
    if imgs.ndim != 2 or imgs.shape[1] != 16:
        raise DimensionError(f"expected flat width 16, got {imgs.shape}")
    if len(imgs) != len(labs):
        raise DimensionError(f"{len(imgs)} images vs {len(labs)} labels")
    keep = (labs >= 1) & (labs <= 4)
    imgs, labs = imgs[keep], labs[keep]
    cols = np.setdiff1d(np.arange(16), CORNER_PIXELS)
    trimmed = imgs[:, cols]
    hot = np.where(labs[:, None] == np.arange(1, 5), 1, -1).astype(np.int8)
    return BinaryDataset(vectors=np.hstack([trimmed, hot]), labels=labs)


def minibatches(
    dataset: BinaryDataset, batch_size: int = 50, epoch_seed: int = 0, epoch: int = 0
) -> Iterator[BinaryDataset]:
    """Batches under a fresh per-epoch permutation; the ragged tail is kept."""
    if batch_size < 1:
        raise DomainError(f"batch size must be >= 1, got {batch_size}")
    perm = _rng.spawn(epoch_seed, "minibatch", epoch).permutation(len(dataset))
    for lo in range(0, len(dataset), batch_size):
        yield dataset.subset(perm[lo : lo + batch_size])


# -- text I/O ---------------------------------------------------------------------
#
# one vector per line, space-separated +-1 entries; '#' starts a comment


def vectors_to_text(dataset: BinaryDataset) -> str:
    lines = []
    for i, row in enumerate(dataset.vectors):
        body = " ".join(str(int(v)) for v in row)
        if dataset.labels is not None:
            body += f"  # label {dataset.labels[i]}"
        lines.append(body)
    return "\n".join(lines) + "\n"


def vectors_from_text(text: str) -> BinaryDataset:
    rows = []
    labels: list = []
    for raw in text.splitlines():
        line, _, comment = raw.partition("#")
        line = line.strip()
        if not line:
            continue
        rows.append([int(tok) for tok in line.split()])
        m = re.match(r"\s*label\s+(-?\d+)\s*$", comment)
        labels.append(int(m.group(1)) if m else None)
    if not rows:
        raise DomainError("no vectors found")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise DimensionError(f"inconsistent vector widths {sorted(widths)}")
    # labels survive the roundtrip only when every row carries one
    labs = None if any(v is None for v in labels) else np.array(labels)
    return BinaryDataset(vectors=np.array(rows, dtype=np.int8), labels=labs)


def write_vectors(dataset: BinaryDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(vectors_to_text(dataset))


def read_vectors(path) -> BinaryDataset:
    with open(path, "r", encoding="utf-8") as fh:
        return vectors_from_text(fh.read())
