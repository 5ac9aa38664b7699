"""Datasets, IDX parsing, synthetic blobs and client partitioning."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedsparse import rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray  # (N, *example_shape), values in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_count: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise DataError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_count)

    def reshape(self, example_shape) -> Dataset:
        return Dataset(self.features.reshape((len(self),) + tuple(example_shape)), self.labels, self.class_count)


def _read(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _idx_body(path, expected_magic: int, ndim: int) -> tuple[list[int], bytes]:
    raw = _read(path)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = list(struct.unpack(f">{ndim}I", raw[4:header]))
    body = raw[header:]
    need = int(np.prod(dims))
    if len(body) < need:
        raise DataError(f"{path}: truncated IDX payload, expected {need} bytes, found {len(body)}")
    return dims, body[:need]


def load_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    """Read an IDX image/label pair (u8 pixels, scaled to [0, 1]). Gzipped files are accepted."""
    dims, pixels = _idx_body(images_path, IDX_IMAGES_MAGIC, 3)
    (count,), labels = _idx_body(labels_path, IDX_LABELS_MAGIC, 1)
    if dims[0] != count:
        raise DataError(f"image count {dims[0]} does not match label count {count}")
    x = np.frombuffer(pixels, dtype=np.uint8).reshape(dims).astype(np.float64) / 255.0
    y = np.frombuffer(labels, dtype=np.uint8).astype(np.int64)
    return Dataset(x, y, class_count)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write u8 images ``(N, rows, cols)`` and labels ``(N,)`` as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def load_cifar_binary(path, fine_labels: bool = False) -> Dataset:
    """CIFAR-10 (1 label byte) or CIFAR-100 (coarse + fine label bytes) binary records."""
    raw = np.frombuffer(_read(path), dtype=np.uint8)
    label_bytes = 2 if fine_labels else 1
    rec = label_bytes + 3072
    if raw.size % rec:
        raise DataError(f"{path}: size {raw.size} is not a multiple of the {rec}-byte record")
    raw = raw.reshape(-1, rec)
    labels = raw[:, label_bytes - 1].astype(np.int64)
    x = raw[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(x, labels, 100 if fine_labels else 10)


def generate_synthetic(class_count: int, dims: int, per_class: int, seed: int, noise: float = 0.05) -> Dataset:
    """Gaussian blobs: per-class uniform mean in [0, 1]^dims plus isotropic noise, clamped."""
    g = rng.stream(seed, rng.DATA)
    means = g.random((class_count, dims))
    x = np.repeat(means, per_class, axis=0)
    if noise > 0:
        x = x + noise * g.standard_normal(x.shape)
    y = np.repeat(np.arange(class_count), per_class)
    return Dataset(np.clip(x, 0.0, 1.0), y, class_count)


@dataclass(frozen=True)
class PartitionSpec:
    mode: str  # "iid" or "label_limited"
    clients: int
    seed: int
    classes_per_client: int | None = None


@dataclass
class Partition:
    indices: list[np.ndarray]

    def sizes(self) -> list[int]:
        return [len(i) for i in self.indices]


def partition(dataset: Dataset, spec: PartitionSpec) -> Partition:
    k = spec.clients
    n = len(dataset)
    if n == 0:
        raise DataError("cannot partition an empty dataset")
    if not 1 <= k <= n:
        raise DataError(f"client count {k} must lie in [1, {n}]")
    g = rng.stream(spec.seed, rng.PARTITION)
    if spec.mode == "iid":
        return Partition(list(np.array_split(g.permutation(n), k)))
    if spec.mode != "label_limited":
        raise DataError(f"unknown partition mode {spec.mode!r}")

    c = spec.classes_per_client
    if c is None or not 1 <= c <= dataset.class_count:
        raise DataError(f"classes per client must lie in [1, {dataset.class_count}], got {c}")
    by_class = [g.permutation(np.flatnonzero(dataset.labels == cls)) for cls in range(dataset.class_count)]
    for _ in range(100):
        drawn = [np.sort(g.choice(dataset.class_count, size=c, replace=False)) for _ in range(k)]
        shards: list[list[np.ndarray]] = [[] for _ in range(k)]
        for cls in range(dataset.class_count):
            holders = [i for i in range(k) if cls in drawn[i]]
            if not holders:
                continue
            # array_split hands the remainder to the lowest client ids
            for i, chunk in zip(holders, np.array_split(by_class[cls], len(holders))):
                shards[i].append(chunk)
        out = [np.sort(np.concatenate(s)) if s else np.empty(0, np.int64) for s in shards]
        # each held class must contribute to each holder, or the label count drifts below c
        if all(sum(len(ch) > 0 for ch in s) == c for s in shards):
            return Partition(out)
    raise DataError(f"could not give all {k} clients examples from {c} classes each after 100 draws")


def split_holdout(indices: np.ndarray, fraction: float, seed: int, key: int) -> tuple[np.ndarray, np.ndarray]:
    """Split index list into (train, held-out); held-out gets ``floor(fraction * len)`` entries."""
    idx = rng.stream(seed, rng.PARTITION, 1000 + key).permutation(indices)
    cut = int(np.floor(fraction * len(idx)))
    return np.sort(idx[cut:]), np.sort(idx[:cut])
