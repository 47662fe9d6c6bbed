"""Datasets, IDX file IO, synthetic generators, and non-IID partitioning.

All randomness is drawn from explicitly seeded PCG64 generators so that
datasets and partitions are reproducible bit-for-bit across runs and
platforms.  Types are immutable after creation and safe to share across
threads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    """A file does not follow the IDX binary layout."""


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class Dataset:
    """Samples (N,C,H,W) or (N,D) in [0,1]-ish float64, integer labels."""

    samples: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.labels) != len(self.samples):
            raise ValueError(
                f"{len(self.samples)} samples but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.samples.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.samples[idx], self.labels[idx], self.num_classes)

    def take_per_class(self, n: int) -> tuple["Dataset", "Dataset"]:
        """Split into (first n of every class, the rest); order preserved."""
        head, tail = [], []
        for c in range(self.num_classes):
            idx = np.flatnonzero(self.labels == c)
            head.append(idx[:n])
            tail.append(idx[n:])
        return self.subset(np.concatenate(head)), self.subset(np.concatenate(tail))


# ---------------------------------------------------------------------------
# IDX binary format (big-endian; images magic 0x803, labels magic 0x801)
# ---------------------------------------------------------------------------


def _read_idx_images(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated IDX image header at offset 0")
    magic, n, rows, cols = struct.unpack_from(">IIII", blob, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{path}: bad image magic 0x{magic:08x} at offset 0")
    expected = 16 + n * rows * cols
    if len(blob) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes, got {len(blob)} (data at offset 16)"
        )
    pixels = np.frombuffer(blob, dtype=np.uint8, offset=16)
    return pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0


def _read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated IDX label header at offset 0")
    magic, n = struct.unpack_from(">II", blob, 0)
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{path}: bad label magic 0x{magic:08x} at offset 0")
    if len(blob) != 8 + n:
        raise FormatError(
            f"{path}: expected {8 + n} bytes, got {len(blob)} (data at offset 8)"
        )
    return np.frombuffer(blob, dtype=np.uint8, offset=8).astype(np.int64)


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair; pixels scaled to [0, 1]."""
    samples = _read_idx_images(images_path)
    labels = _read_idx_labels(labels_path)
    if len(labels) != len(samples):
        raise FormatError(
            f"count mismatch: {len(samples)} images vs {len(labels)} labels"
        )
    return Dataset(samples, labels, int(labels.max()) + 1 if len(labels) else 1)


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write a dataset as an IDX pair (pixels quantized to uint8)."""
    x = ds.samples
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"IDX export needs (N,1,H,W) samples, got {x.shape}")
    n, _, rows, cols = x.shape
    pixels = np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(ds.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------


def synth_dataset(num_classes: int, n_per_class: int, dim: int, seed: int, spread: float = 3.0) -> Dataset:
    """Gaussian blobs: one N(0, spread^2) mean per class, unit within-class variance."""
    if min(num_classes, n_per_class, dim) < 1:
        raise ValueError("num_classes, n_per_class and dim must be positive")
    rng = _rng(seed)
    means = rng.normal(0.0, spread, size=(num_classes, dim))
    samples = np.empty((num_classes * n_per_class, dim))
    labels = np.empty(num_classes * n_per_class, dtype=np.int64)
    for c in range(num_classes):
        sl = slice(c * n_per_class, (c + 1) * n_per_class)
        samples[sl] = means[c] + rng.normal(size=(n_per_class, dim))
        labels[sl] = c
    return Dataset(samples, labels, num_classes)


def _bilinear_matrix(src: int, dst: int) -> np.ndarray:
    # dst x src interpolation weights (hat functions on a shared grid)
    pos = np.linspace(0.0, src - 1.0, dst)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    m = np.zeros((dst, src))
    m[np.arange(dst), lo] += 1.0 - frac
    m[np.arange(dst), hi] += frac
    return m


def synth_image_dataset(
    num_classes: int,
    n_per_class: int,
    seed: int,
    size: int = 28,
    noise: float = 0.25,
    max_shift: int = 3,
    proto_grid: int = 7,
) -> Dataset:
    """Digit-like (N,1,size,size) images: one smooth random prototype per
    class, cyclically shifted and corrupted with Gaussian pixel noise.

    `noise` and `max_shift` tune how hard the classes are to separate.
    """
    if min(num_classes, n_per_class, size, proto_grid) < 1 or max_shift < 0:
        raise ValueError("generator parameters must be positive (max_shift >= 0)")
    rng = _rng(seed)
    up = _bilinear_matrix(proto_grid, size)
    protos = []
    for _ in range(num_classes):
        g = rng.normal(size=(proto_grid, proto_grid))
        img = up @ g @ up.T
        lo, hi = img.min(), img.max()
        protos.append(0.15 + 0.7 * (img - lo) / (hi - lo if hi > lo else 1.0))
    n = num_classes * n_per_class
    samples = np.empty((n, 1, size, size))
    labels = np.empty(n, dtype=np.int64)
    for c in range(num_classes):
        shifts = rng.integers(-max_shift, max_shift + 1, size=(n_per_class, 2))
        eta = rng.normal(0.0, noise, size=(n_per_class, size, size))
        for i in range(n_per_class):
            img = np.roll(protos[c], tuple(shifts[i]), axis=(0, 1)) + eta[i]
            samples[c * n_per_class + i, 0] = np.clip(img, 0.0, 1.0)
        labels[c * n_per_class : (c + 1) * n_per_class] = c
    return Dataset(samples, labels, num_classes)


# ---------------------------------------------------------------------------
# Dirichlet label-skew partitioning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PartitionPlan:
    """Disjoint client shards; every client holds at least one sample."""

    assignments: dict[int, np.ndarray]
    alpha: float
    seed: int

    def __post_init__(self):
        seen: set[int] = set()
        for cid, idx in self.assignments.items():
            if len(idx) == 0:
                raise ValueError(f"client {cid} received an empty shard")
            as_set = set(int(i) for i in idx)
            if seen & as_set:
                raise ValueError("shards overlap")
            seen |= as_set

    def to_json(self) -> str:
        return json.dumps(
            {str(cid): [int(i) for i in idx] for cid, idx in sorted(self.assignments.items())}
        )


def _largest_remainder(p: np.ndarray, total: int) -> np.ndarray:
    raw = p * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def dirichlet_partition(ds: Dataset, num_clients: int, alpha: float, seed: int) -> PartitionPlan:
    """Label-skewed split: per label, client proportions ~ Dirichlet(alpha).

    Dirichlet draws are Gamma(alpha, 1) variates from a PCG64 stream
    normalized to sum one; each label's samples are cut contiguously by the
    largest-remainder rounding of those proportions.  Clients that end up
    empty steal one sample from the currently largest shard, because every
    client must be able to train.  Shard sizes stay unbalanced on purpose.
    """
    if num_clients < 1:
        raise ValueError(f"num_clients must be >= 1, got {num_clients}")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if num_clients > len(ds):
        raise ValueError(f"{num_clients} clients cannot share {len(ds)} samples")
    rng = _rng(seed)
    shards: list[list[int]] = [[] for _ in range(num_clients)]
    for label in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == label)
        if idx.size == 0:
            continue
        g = rng.gamma(alpha, 1.0, size=num_clients)
        total = g.sum()
        p = g / total if total > 0 else np.full(num_clients, 1.0 / num_clients)
        counts = _largest_remainder(p, idx.size)
        stop = np.cumsum(counts)
        start = stop - counts
        for c in range(num_clients):
            shards[c].extend(int(i) for i in idx[start[c] : stop[c]])
    for c in range(num_clients):
        if not shards[c]:
            donor = int(np.argmax([len(s) for s in shards]))
            shards[c].append(shards[donor].pop())
    return PartitionPlan(
        {c: np.asarray(s, dtype=np.int64) for c, s in enumerate(shards)}, alpha, seed
    )
