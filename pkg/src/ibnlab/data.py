"""IDX image ingestion, imbalanced split construction, and batch iteration.

The IDX codec is bit-exact: parsing a file and re-encoding it reproduces the
original bytes. Gzip-compressed inputs are detected by their 2-byte prefix.
Split construction is deterministic under a seed and tracks source indices so
disjointness between train/val/test is checkable after the fact.
"""

from __future__ import annotations

import gzip
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
GZIP_PREFIX = b"\x1f\x8b"


@dataclass
class Dataset:
    """Immutable image/label pairs with tracked provenance.

    Images are float64 in [0, 1] with shape (n, 1, height, width); labels are
    int64 class ids. ``source_indices`` records each sample's position in the
    dataset it was drawn from, enabling split-disjointness checks.
    """

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    source_indices: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValueError(f"images must be (n, 1, h, w), got {self.images.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise ValueError(
                f"{self.images.shape[0]} images but {self.labels.shape} labels"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values outside [0, 1]")
        if self.source_indices is not None:
            self.source_indices = np.asarray(self.source_indices, dtype=np.int64)
            if self.source_indices.shape != self.labels.shape:
                raise ValueError("source_indices length does not match sample count")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        src = self.source_indices[idx] if self.source_indices is not None else idx
        return Dataset(self.images[idx], self.labels[idx], list(self.class_names), src)


def _read_file(path) -> bytes:
    blob = Path(path).read_bytes()
    if blob[:2] == GZIP_PREFIX:
        blob = gzip.decompress(blob)
    return blob


def _parse_idx(blob: bytes, path, expected_magic: int) -> np.ndarray:
    if len(blob) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    magic = int.from_bytes(blob[:4], "big")
    if magic != expected_magic:
        raise ValueError(f"{path}: bad magic {magic}, expected {expected_magic}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(blob) < header_len:
        raise ValueError(f"{path}: truncated IDX header")
    dims = [
        int.from_bytes(blob[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)
    ]
    count = math.prod(dims)
    payload = blob[header_len:]
    if len(payload) != count:
        raise ValueError(
            f"{path}: payload holds {len(payload)} bytes, header promises {count}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label file pair into a Dataset scaled to [0, 1]."""
    raw_images = _parse_idx(_read_file(images_path), images_path, IMAGE_MAGIC)
    raw_labels = _parse_idx(_read_file(labels_path), labels_path, LABEL_MAGIC)
    if raw_images.shape[0] != raw_labels.shape[0]:
        raise ValueError(
            f"{images_path} holds {raw_images.shape[0]} images but "
            f"{labels_path} holds {raw_labels.shape[0]} labels"
        )
    n, h, w = raw_images.shape
    images = raw_images.reshape(n, 1, h, w).astype(np.float64) / 255.0
    num_classes = int(raw_labels.max()) + 1 if n else 0
    return Dataset(
        images=images,
        labels=raw_labels.astype(np.int64),
        class_names=[str(c) for c in range(num_classes)],
        source_indices=np.arange(n),
    )


def encode_idx_images(images: np.ndarray) -> bytes:
    """Encode (n, h, w) uint8 images as IDX bytes."""
    arr = np.ascontiguousarray(images, dtype=np.uint8)
    if arr.ndim != 3:
        raise ValueError(f"expected (n, h, w) images, got {arr.shape}")
    header = IMAGE_MAGIC.to_bytes(4, "big") + b"".join(
        d.to_bytes(4, "big") for d in arr.shape
    )
    return header + arr.tobytes()


def encode_idx_labels(labels: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(labels, dtype=np.uint8)
    if arr.ndim != 1:
        raise ValueError(f"expected a label vector, got shape {arr.shape}")
    return LABEL_MAGIC.to_bytes(4, "big") + arr.shape[0].to_bytes(4, "big") + arr.tobytes()


def dataset_to_idx_bytes(data: Dataset) -> tuple[bytes, bytes]:
    """Re-encode a Dataset as IDX image/label byte blobs (inverse of load_idx)."""
    pixels = np.rint(data.images[:, 0] * 255.0).astype(np.uint8)
    return encode_idx_images(pixels), encode_idx_labels(data.labels)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class ImbalanceSpec:
    """Recipe for carving an imbalanced train/val/test split from a source set.

    ``ratio`` is the minority:majority fraction applied to the train counts.
    Validation samples are drawn per class on top of the train allocation, at
    ``val_fraction`` of that class's train count, so val preserves the ratio.
    The test set is balanced at ``test_per_class``.
    """

    majority_classes: list[int]
    minority_classes: list[int]
    majority_train_count: int
    ratio: float
    val_fraction: float = 0.15
    test_per_class: int = 500

    def __post_init__(self) -> None:
        self.majority_classes = [int(c) for c in self.majority_classes]
        self.minority_classes = [int(c) for c in self.minority_classes]
        if not self.majority_classes or not self.minority_classes:
            raise ValueError("need at least one majority and one minority class")
        overlap = set(self.majority_classes) & set(self.minority_classes)
        if overlap:
            raise ValueError(f"classes {sorted(overlap)} appear on both sides")
        if len(set(self.majority_classes)) != len(self.majority_classes):
            raise ValueError("duplicate majority classes")
        if len(set(self.minority_classes)) != len(self.minority_classes):
            raise ValueError("duplicate minority classes")
        if self.majority_train_count < 1:
            raise ValueError("majority_train_count must be positive")
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.ratio * self.majority_train_count < 1.0:
            raise ValueError(
                f"ratio {self.ratio} x {self.majority_train_count} majority samples "
                "leaves the minority class empty"
            )
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.test_per_class < 1:
            raise ValueError("test_per_class must be positive")

    @property
    def minority_train_count(self) -> int:
        return max(1, _round_half_up(self.ratio * self.majority_train_count))

    def train_count(self, source_class: int) -> int:
        if source_class in self.majority_classes:
            return self.majority_train_count
        return self.minority_train_count

    def class_map(self) -> dict[int, int]:
        """Source labels to experiment ids: majorities first, each side sorted."""
        ordered = sorted(self.majority_classes) + sorted(self.minority_classes)
        return {src: i for i, src in enumerate(ordered)}


@dataclass
class SplitBundle:
    train: Dataset
    val: Dataset
    test: Dataset
    class_map: dict[int, int] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_map)


def build_imbalanced_split(source: Dataset, spec: ImbalanceSpec, seed: int) -> SplitBundle:
    """Carve disjoint train/val/test splits with the requested imbalance.

    Per class: the first ``train_count`` shuffled samples go to train, the
    next ``round(val_fraction * train_count)`` to val, and ``test_per_class``
    more to test. Labels are remapped to contiguous experiment ids.
    """
    rng = np.random.default_rng([seed, 0xDA7A])
    class_map = spec.class_map()
    picks: dict[str, list[np.ndarray]] = {"train": [], "val": [], "test": []}
    for source_class in sorted(class_map, key=class_map.get):
        pool = np.flatnonzero(source.labels == source_class)
        n_train = spec.train_count(source_class)
        n_val = _round_half_up(spec.val_fraction * n_train)
        needed = n_train + n_val + spec.test_per_class
        if pool.size < needed:
            raise ValueError(
                f"class {source_class}: need {needed} samples "
                f"({n_train} train + {n_val} val + {spec.test_per_class} test), "
                f"only {pool.size} available"
            )
        order = rng.permutation(pool)
        picks["train"].append(order[:n_train])
        picks["val"].append(order[n_train : n_train + n_val])
        picks["test"].append(order[n_train + n_val : needed])

    names = [str(src) for src in sorted(class_map, key=class_map.get)]
    splits = {}
    for part, chunks in picks.items():
        idx = rng.permutation(np.concatenate(chunks))
        src_idx = (
            source.source_indices[idx]
            if source.source_indices is not None
            else idx
        )
        remapped = np.array([class_map[int(c)] for c in source.labels[idx]])
        splits[part] = Dataset(source.images[idx], remapped, names, src_idx)
    return SplitBundle(splits["train"], splits["val"], splits["test"], class_map)


def batch_iterator(
    data: Dataset,
    batch_size: int,
    seed: int = 0,
    epoch: int = 0,
    train: bool = True,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) batches.

    Training mode reshuffles under (seed, epoch) and drops the final partial
    batch: a short tail would let a handful of samples dominate the batch
    statistics. Eval mode walks the natural order and keeps the tail.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    n = len(data)
    if train:
        if batch_size < 2:
            raise ValueError("training batches need at least 2 samples")
        order = np.random.default_rng([seed, epoch]).permutation(n)
        stop = (n // batch_size) * batch_size
    else:
        order = np.arange(n)
        stop = n
    for start in range(0, stop, batch_size):
        idx = order[start : start + batch_size]
        yield data.images[idx], data.labels[idx]
