"""Datasets, IDX ingestion and non-iid client partitioning."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import FormatError, IdxLengthError, IdxMagicError, ParameterError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_GZIP_MAGIC = b"\x1f\x8b"


@dataclass(frozen=True)
class LabeledDataset:
    """Samples scaled to [-1, 1] with dense integer labels in [0, n_classes).

    ``scale`` and ``offset`` record the mapping ``raw * scale + offset`` that
    produced the samples.
    """

    samples: np.ndarray
    labels: np.ndarray
    n_classes: int
    scale: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if self.samples.ndim != 2:
            raise ParameterError("samples must be a 2-D array")
        if self.samples.shape[0] != self.labels.shape[0]:
            raise ParameterError(
                f"{self.samples.shape[0]} samples but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ParameterError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def sample_dim(self) -> int:
        return self.samples.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.samples[indices], self.labels[indices], self.n_classes, self.scale, self.offset)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(frozen=True)
class Shard:
    client_id: int
    indices: np.ndarray

    def __len__(self) -> int:
        return self.indices.shape[0]


@dataclass(frozen=True)
class PartitionPlan:
    dirichlet_alpha: float
    n_clients: int
    sampling_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.dirichlet_alpha > 0:
            raise ParameterError(f"dirichlet_alpha must be positive, got {self.dirichlet_alpha}")
        if self.n_clients < 1:
            raise ParameterError(f"need at least one client, got {self.n_clients}")
        if not 0 < self.sampling_ratio <= 1:
            raise ParameterError(f"sampling ratio must lie in (0, 1], got {self.sampling_ratio}")


@dataclass(frozen=True)
class MixtureSpec:
    means: np.ndarray
    stds: np.ndarray
    samples_per_class: int

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        stds = np.broadcast_to(np.asarray(self.stds, dtype=np.float64), (means.shape[0],)).copy()
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)
        if len(np.unique(means, axis=0)) != means.shape[0]:
            raise ParameterError("mixture means must be distinct")
        if (stds < 0).any():
            raise ParameterError("mixture standard deviations must be non-negative")
        if self.samples_per_class < 0:
            raise ParameterError("samples_per_class must be non-negative")

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @classmethod
    def default(cls, samples_per_class: int = 500, std: float = 0.1) -> "MixtureSpec":
        """Four well separated classes in 2-D, one per quadrant."""
        means = np.array([[-0.5, -0.5], [0.5, -0.5], [-0.5, 0.5], [0.5, 0.5]])
        return cls(means, np.full(4, std), samples_per_class)


# ----------------------------------------------------------------------- IDX


def _maybe_gunzip(data: bytes) -> bytes:
    return gzip.decompress(data) if data[:2] == _GZIP_MAGIC else data


def read_idx(data: bytes, magic: int) -> tuple[tuple[int, ...], np.ndarray]:
    """Parse an unsigned-byte IDX container; returns its dims and raw payload."""
    data = _maybe_gunzip(bytes(data))
    if len(data) < 4:
        raise IdxLengthError(4, len(data))
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise IdxMagicError(magic, found)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxLengthError(header, len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(data) - header
    if payload != expected:
        raise IdxLengthError(expected, payload)
    raw = np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)
    return tuple(dims), raw


def write_idx(raw: np.ndarray, magic: int) -> bytes:
    raw = np.asarray(raw)
    if raw.ndim != magic & 0xFF:
        raise FormatError(f"IDX magic 0x{magic:08x} needs {magic & 0xFF} dims, array has {raw.ndim}")
    header = struct.pack(">I", magic) + struct.pack(f">{raw.ndim}I", *raw.shape)
    return header + raw.astype(np.uint8).tobytes()


def parse_idx_images(data: bytes) -> np.ndarray:
    """IDX3 image file -> (count, rows*cols) float64 in [-1, 1] via v / 127.5 - 1."""
    (count, rows, cols), raw = read_idx(data, IDX_IMAGES_MAGIC)
    return raw.reshape(count, rows * cols).astype(np.float64) / 127.5 - 1.0


def parse_idx_labels(data: bytes) -> np.ndarray:
    _, raw = read_idx(data, IDX_LABELS_MAGIC)
    return raw.astype(np.int64)


def serialize_idx_images(images: np.ndarray, rows: int, cols: int) -> bytes:
    """Inverse of :func:`parse_idx_images`."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 2 or images.shape[1] != rows * cols:
        raise FormatError(f"images of shape {images.shape} cannot be laid out as {rows}x{cols}")
    raw = np.rint((images + 1.0) * 127.5)
    if raw.size and (raw.min() < 0 or raw.max() > 255):
        raise FormatError("pixel values outside [-1, 1]")
    return write_idx(raw.astype(np.uint8).reshape(-1, rows, cols), IDX_IMAGES_MAGIC)


def serialize_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise FormatError("IDX labels must fit in one unsigned byte")
    return write_idx(labels.astype(np.uint8), IDX_LABELS_MAGIC)


def dense_labels(labels: np.ndarray, n_classes: int | None = None) -> tuple[np.ndarray, int]:
    """Re-index labels to 0..n-1.

    With ``n_classes`` given, labels already in that range are kept as-is so
    that class ids stay stable across train and test files.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if n_classes is not None and (labels.size == 0 or (labels.min() >= 0 and labels.max() < n_classes)):
        return labels, n_classes
    values, dense = np.unique(labels, return_inverse=True)
    return dense.astype(np.int64), max(len(values), n_classes or 0)


def load_idx_dataset(images_path, labels_path, n_classes: int | None = None) -> LabeledDataset:
    images = parse_idx_images(Path(images_path).read_bytes())
    labels = parse_idx_labels(Path(labels_path).read_bytes())
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images_path} has {images.shape[0]} images but {labels_path} has {labels.shape[0]} labels")
    labels, n = dense_labels(labels, n_classes)
    return LabeledDataset(images, labels, n, scale=1 / 127.5, offset=-1.0)


# ------------------------------------------------------------ synthetic data


def synth_gaussian_mixture(spec: MixtureSpec, seed: int) -> LabeledDataset:
    rng = np.random.default_rng(seed)
    dim = spec.means.shape[1]
    xs, ys = [], []
    for c in range(spec.n_classes):
        noise = rng.standard_normal((spec.samples_per_class, dim)) * spec.stds[c]
        xs.append(np.clip(spec.means[c] + noise, -1.0, 1.0))
        ys.append(np.full(spec.samples_per_class, c, dtype=np.int64))
    samples = np.vstack(xs) if xs else np.zeros((0, dim))
    return LabeledDataset(samples, np.concatenate(ys), spec.n_classes)


# ------------------------------------------------------------ partitioning


def subsample(ds: LabeledDataset, r: float, seed: int) -> LabeledDataset:
    """Stratified subsample keeping floor(r * count_c) items of every class."""
    if not 0 < r <= 1:
        raise ParameterError(f"sampling ratio must lie in (0, 1], got {r}")
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == c)
        take = int(np.floor(r * idx.size))
        keep.append(np.sort(rng.permutation(idx)[:take]))
    return ds.subset(np.sort(np.concatenate(keep)))


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts proportional to ``weights`` summing exactly to ``total``.

    Leftover units go to the largest fractional parts, ties to the lower index.
    """
    weights = np.asarray(weights, dtype=np.float64)
    s = weights.sum()
    quotas = weights / s * total if s > 0 else np.full(weights.shape, total / weights.size)
    counts = np.floor(quotas).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.lexsort((np.arange(weights.size), -(quotas - counts)))
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(ds: LabeledDataset, plan: PartitionPlan) -> list[Shard]:
    """Per-class Dirichlet(alpha) proportions over clients, rounded by largest remainder.

    Shards are disjoint and cover the dataset. A client may end up empty.
    """
    if len(ds) == 0:
        raise ParameterError("cannot partition an empty dataset")
    rng = np.random.default_rng(plan.seed)
    k = plan.n_clients
    owned: list[list[np.ndarray]] = [[] for _ in range(k)]
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == c)
        props = rng.dirichlet(np.full(k, plan.dirichlet_alpha)) if k > 1 else np.ones(1)
        if not np.isfinite(props).all():
            # numpy can underflow every component at extremely small alpha.
            props = np.zeros(k)
            props[rng.integers(k)] = 1.0
        counts = largest_remainder(props, idx.size)
        idx = rng.permutation(idx)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for j in range(k):
            owned[j].append(idx[bounds[j] : bounds[j + 1]])
    return [Shard(j, np.sort(np.concatenate(parts)).astype(np.int64)) for j, parts in enumerate(owned)]


def iid_partition(ds: LabeledDataset, n_clients: int, seed: int) -> list[Shard]:
    perm = np.random.default_rng(seed).permutation(len(ds))
    return [Shard(j, np.sort(part)) for j, part in enumerate(np.array_split(perm, n_clients))]


def one_class_partition(ds: LabeledDataset, n_clients: int) -> list[Shard]:
    """Client j owns every sample of class j; needs ``n_clients == n_classes``."""
    if n_clients != ds.n_classes:
        raise ParameterError(f"one-class partition needs {ds.n_classes} clients, got {n_clients}")
    return [Shard(j, np.flatnonzero(ds.labels == j)) for j in range(n_clients)]


def quantity_skew_partition(ds: LabeledDataset, sizes: Sequence[int], seed: int) -> list[Shard]:
    """Clients with prescribed sizes, each holding an equal share of every class.

    Each client of size s receives ``s // n_classes`` samples per class (plus
    one extra for the first ``s % n_classes`` classes). Samples not assigned
    to anyone are dropped.
    """
    rng = np.random.default_rng(seed)
    n = ds.n_classes
    pools = [list(rng.permutation(np.flatnonzero(ds.labels == c))) for c in range(n)]
    shards = []
    for j, size in enumerate(sizes):
        if size < 0:
            raise ParameterError("client sizes must be non-negative")
        per_class = largest_remainder(np.ones(n), int(size))
        taken = []
        for c in range(n):
            need = int(per_class[c])
            if need > len(pools[c]):
                raise ParameterError(f"class {c} has too few samples for the requested client sizes")
            taken.extend(pools[c][:need])
            del pools[c][:need]
        shards.append(Shard(j, np.sort(np.asarray(taken, dtype=np.int64))))
    return shards


def class_count_matrix(ds: LabeledDataset, shards: Sequence[Shard]) -> np.ndarray:
    """(clients, classes) matrix of sample counts."""
    return np.array(
        [np.bincount(ds.labels[s.indices], minlength=ds.n_classes) for s in shards], dtype=np.int64
    ).reshape(len(shards), ds.n_classes)


def partition_to_json(ds: LabeledDataset, shards: Sequence[Shard], plan: PartitionPlan | None = None) -> str:
    doc = {}
    if plan is not None:
        doc.update(alpha=plan.dirichlet_alpha, K=plan.n_clients, r=plan.sampling_ratio, seed=plan.seed)
    doc["counts"] = class_count_matrix(ds, shards).tolist()
    return json.dumps(doc, indent=2) + "\n"


def format_count_table(counts: np.ndarray) -> str:
    """Aligned text table: one row per client, one column per class, plus totals."""
    counts = np.asarray(counts)
    header = ["client"] + [f"c{c}" for c in range(counts.shape[1])] + ["total"]
    rows = [[str(j)] + [str(v) for v in row] + [str(int(row.sum()))] for j, row in enumerate(counts)]
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in [header] + rows]
    return "\n".join(lines) + "\n"


def batch_iter(indices: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch: a seeded permutation cut into batches; the last one may be short."""
    if batch_size < 1:
        raise ParameterError("batch size must be >= 1")
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        return []
    perm = indices[rng.permutation(indices.size)]
    return [perm[i : i + batch_size] for i in range(0, perm.size, batch_size)]
