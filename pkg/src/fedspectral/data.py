"""Synthetic dataset generation, IDX-format ingestion, and non-IID partitions.

The five partition regimes mirror common federated benchmarks: IID shuffle,
label skew with nested label prefixes, staircase data quantities, combined
label/quantity staircase, and per-class Dirichlet splits. All routines are
pure and deterministic per seed.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ContractError, DimensionError, IdxFormatError, PartitionError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

_BLOBS_STREAM = 10
_PARTITION_STREAM = 11
_HOLDOUT_STREAM = 12


@dataclass
class Dataset:
    """Feature matrix (n x d), integer labels in [0, num_classes)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DimensionError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DimensionError("labels length must equal the number of samples")
        if self.num_classes < 1:
            raise ContractError("num_classes must be positive")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx].copy(), self.labels[idx].copy(), self.num_classes)


class PartitionKind(Enum):
    IID = "iid"
    ONLY_LABEL_SKEW = "only_label_skew"
    STEP_QUANTITY = "step_quantity"
    STEP_LABEL_SKEW = "step_label_skew"
    DIRICHLET = "dirichlet"


@dataclass(frozen=True)
class PartitionSpec:
    kind: PartitionKind
    n_clients: int
    seed: int
    alpha: float | None = None

    def __post_init__(self):
        if self.n_clients < 2:
            raise ContractError("need at least 2 clients")
        if self.kind is PartitionKind.DIRICHLET and (self.alpha is None or self.alpha <= 0.0):
            raise ContractError("dirichlet partition needs alpha > 0")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class DataSpec:
    """Where a run's samples come from: synthetic blobs or an IDX file pair."""

    classes: int = 10
    features: int = 32
    per_class: int = 150
    separation: float = 4.0
    test_fraction: float = 0.2
    images: str | None = None
    labels: str | None = None

    def __post_init__(self):
        if (self.images is None) != (self.labels is None):
            raise ContractError("images and labels paths must be given together")
        if not 0.0 < self.test_fraction < 1.0:
            raise ContractError("test_fraction must be in (0, 1)")


def make_dataset(spec: DataSpec, seed: int) -> Dataset:
    """Materialize the dataset a config describes."""
    if spec.images is not None:
        return load_idx(spec.images, spec.labels)
    return generate_blobs(spec.classes, spec.features, spec.per_class, spec.separation, seed)


def generate_blobs(
    num_classes: int, num_features: int, per_class: int, separation: float, seed: int
) -> Dataset:
    """Balanced Gaussian blobs around class centers spread on the sphere.

    Centers are seeded random directions scaled by `separation`; when the
    feature dim admits it (d >= C) they are orthonormalized so classes are
    symmetric. Noise is isotropic with unit variance.
    """
    if num_classes < 2 or num_features < 2 or per_class < 1 or separation <= 0.0:
        raise ContractError("need C >= 2, d >= 2, per_class >= 1, separation > 0")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _BLOBS_STREAM]))
    directions = rng.standard_normal((num_classes, num_features))
    if num_features >= num_classes:
        q, _ = np.linalg.qr(directions.T)
        centers = q.T[:num_classes]
    else:
        centers = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    features = np.empty((num_classes * per_class, num_features))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for c in range(num_classes):
        block = slice(c * per_class, (c + 1) * per_class)
        features[block] = separation * centers[c] + rng.standard_normal((per_class, num_features))
        labels[block] = c
    return Dataset(features, labels, num_classes)


def _read_idx_header(blob: bytes, path: str, magic: int, n_dims: int) -> tuple[int, ...]:
    header_len = 4 * (1 + n_dims)
    if len(blob) < header_len:
        raise IdxFormatError(f"{path}: truncated header")
    fields = struct.unpack(f">{1 + n_dims}I", blob[:header_len])
    if fields[0] != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{fields[0]:08x}, expected 0x{magic:08x}")
    return fields[1:]


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Parse a big-endian IDX image/label file pair into a flat dataset.

    Pixels are scaled to [0, 1] and images flattened row-major.
    """
    with open(images_path, "rb") as f:
        img_blob = f.read()
    with open(labels_path, "rb") as f:
        lab_blob = f.read()
    n_images, rows, cols = _read_idx_header(img_blob, images_path, IMAGES_MAGIC, 3)
    (n_labels,) = _read_idx_header(lab_blob, labels_path, LABELS_MAGIC, 1)
    if n_images != n_labels:
        raise IdxFormatError(f"{n_images} images but {n_labels} labels")
    n_pixels = n_images * rows * cols
    if len(img_blob) < 16 + n_pixels:
        raise IdxFormatError(f"{images_path}: truncated pixel data")
    if len(lab_blob) < 8 + n_labels:
        raise IdxFormatError(f"{labels_path}: truncated label data")
    pixels = np.frombuffer(img_blob, dtype=np.uint8, count=n_pixels, offset=16)
    features = pixels.reshape(n_images, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab_blob, dtype=np.uint8, count=n_labels, offset=8).astype(np.int64)
    num_classes = int(labels.max()) + 1 if n_labels else 1
    return Dataset(features, labels, num_classes)


def _labels_per_client(num_classes: int, n_clients: int) -> list[int]:
    """Nested label-prefix sizes, growing with client rank up to all classes."""
    return [max(1, _round_half_up(num_classes * i / n_clients)) for i in range(1, n_clients + 1)]


def _class_pools(ds: Dataset, rng: np.random.Generator) -> list[np.ndarray]:
    pools = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        pools.append(rng.permutation(idx))
    return pools


def _prefix_quotas(size: int, n_labels: int) -> list[int]:
    """Split `size` as evenly as possible over the first n_labels classes."""
    q, r = divmod(size, n_labels)
    return [q + (1 if c < r else 0) for c in range(n_labels)]


def _equal_size_cap(class_counts: np.ndarray, labels_per_client: list[int], target: int) -> int:
    """Largest common shard size whose per-class demand fits the class pools."""
    for size in range(target, 0, -1):
        remaining = class_counts.astype(np.int64).copy()
        feasible = True
        for n_labels in labels_per_client:
            for c, need in enumerate(_prefix_quotas(size, n_labels)):
                remaining[c] -= need
                if remaining[c] < 0:
                    feasible = False
                    break
            if not feasible:
                break
        if feasible:
            return size
    raise PartitionError("no feasible common shard size; dataset too small for the label prefixes")


def _take(pool_cursor: list[int], pools: list[np.ndarray], c: int, count: int) -> np.ndarray:
    start = pool_cursor[c]
    if start + count > pools[c].shape[0]:
        raise PartitionError(f"class {c} exhausted: requested {count}, have {pools[c].shape[0] - start}")
    pool_cursor[c] = start + count
    return pools[c][start : start + count]


def partition(ds: Dataset, spec: PartitionSpec) -> list[Dataset]:
    """Split a dataset into per-client shards under the requested regime.

    Shards are disjoint by sample index and never duplicate samples. The
    IID, step-quantity and Dirichlet regimes consume the whole dataset; the
    label-skew regimes draw equal-structure subsets, capped to the largest
    size for which every client can cover its nested label prefix.
    """
    n = len(ds)
    k = spec.n_clients
    if n < k:
        raise PartitionError(f"{n} samples cannot cover {k} clients")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _PARTITION_STREAM]))
    class_counts = np.bincount(ds.labels, minlength=ds.num_classes)

    if spec.kind is PartitionKind.IID:
        perm = rng.permutation(n)
        base, extra = divmod(n, k)
        shard_indices = []
        start = 0
        for i in range(k):
            size = base + (1 if i < extra else 0)
            shard_indices.append(perm[start : start + size])
            start += size

    elif spec.kind is PartitionKind.ONLY_LABEL_SKEW:
        labels_per = _labels_per_client(ds.num_classes, k)
        size = _equal_size_cap(class_counts, labels_per, n // k)
        if size < labels_per[-1]:
            raise PartitionError(
                f"shard size {size} cannot cover {labels_per[-1]} classes with one sample each"
            )
        pools = _class_pools(ds, rng)
        cursor = [0] * ds.num_classes
        shard_indices = []
        for n_labels in labels_per:
            parts = [
                _take(cursor, pools, c, need)
                for c, need in enumerate(_prefix_quotas(size, n_labels))
            ]
            shard_indices.append(np.concatenate(parts))

    elif spec.kind is PartitionKind.STEP_QUANTITY:
        unit = n // (k * (k + 1) // 2)
        if unit < 1:
            raise PartitionError(f"{n} samples cannot realize a 1:2:...:{k} staircase")
        pools = _class_pools(ds, rng)
        cursor = [0] * ds.num_classes
        shard_indices = []
        for rank in range(1, k + 1):
            size = unit * rank
            parts = [
                _take(cursor, pools, c, need)
                for c, need in enumerate(_prefix_quotas(size, ds.num_classes))
            ]
            shard_indices.append(np.concatenate(parts))

    elif spec.kind is PartitionKind.STEP_LABEL_SKEW:
        labels_per = _labels_per_client(ds.num_classes, k)
        coverage = [sum(1 for l in labels_per if l > c) for c in range(ds.num_classes)]
        unit = min(
            n // sum(labels_per),
            min(
                int(class_counts[c]) // coverage[c]
                for c in range(ds.num_classes)
                if coverage[c] > 0
            ),
        )
        if unit < 1:
            raise PartitionError("dataset too small for the label/quantity staircase")
        pools = _class_pools(ds, rng)
        cursor = [0] * ds.num_classes
        shard_indices = []
        for n_labels in labels_per:
            parts = [_take(cursor, pools, c, unit) for c in range(n_labels)]
            shard_indices.append(np.concatenate(parts))

    elif spec.kind is PartitionKind.DIRICHLET:
        pools = _class_pools(ds, rng)
        per_client: list[list[np.ndarray]] = [[] for _ in range(k)]
        for c in range(ds.num_classes):
            m = pools[c].shape[0]
            if m == 0:
                continue
            draws = rng.gamma(spec.alpha, 1.0, size=k)
            total = draws.sum()
            if total <= 0.0:
                draws = np.zeros(k)
                draws[int(rng.integers(k))] = 1.0
                total = 1.0
            props = draws / total
            counts = np.floor(props * m).astype(np.int64)
            deficit = m - int(counts.sum())
            order = np.argsort(-(props * m - counts), kind="stable")
            counts[order[:deficit]] += 1
            start = 0
            for i in range(k):
                per_client[i].append(pools[c][start : start + counts[i]])
                start += counts[i]
        shard_indices = [
            np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
            for parts in per_client
        ]
        # Every client must be able to train: top up empty shards from the largest.
        for i in range(k):
            while shard_indices[i].shape[0] == 0:
                donor = int(np.argmax([s.shape[0] for s in shard_indices]))
                if shard_indices[donor].shape[0] <= 1:
                    raise PartitionError("not enough samples to give every client one")
                shard_indices[i] = shard_indices[donor][-1:]
                shard_indices[donor] = shard_indices[donor][:-1]

    else:  # pragma: no cover - enum is exhaustive
        raise ContractError(f"unknown partition kind {spec.kind}")

    return [ds.subset(np.sort(idx)) for idx in shard_indices]


def holdout_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified train/test split, deterministic per seed."""
    if not 0.0 < test_fraction < 1.0:
        raise ContractError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _HOLDOUT_STREAM]))
    test_parts = []
    train_parts = []
    for c in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        n_test = _round_half_up(test_fraction * idx.shape[0])
        n_test = min(n_test, idx.shape[0])
        test_parts.append(idx[:n_test])
        train_parts.append(idx[n_test:])
    train_idx = np.sort(np.concatenate(train_parts))
    test_idx = np.sort(np.concatenate(test_parts))
    return ds.subset(train_idx), ds.subset(test_idx)
