"""Synthetic Gaussian-blob classification data and the ``DTKS`` file format.

File layout (little-endian)::

    offset 0   b"DTKS"
    offset 4   u16 version (1)
    offset 6   u32 n_samples, u32 dim, u32 n_classes
    offset 18  f32 features[n_samples * dim]   (row-major)
    ...        u16 labels[n_samples]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dtkd.numkit import DomainError, make_rng

MAGIC = b"DTKS"
VERSION = 1
HEADER = struct.Struct("<4sHIII")


class ParseError(ValueError):
    def __init__(self, message: str, offset: int, record: int | None = None):
        where = f"offset {offset}" + ("" if record is None else f", record {record}")
        super().__init__(f"{message} at {where}")
        self.offset = offset
        self.record = record


@dataclass(frozen=True)
class DatasetSplit:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        f = np.asarray(self.features)
        y = np.asarray(self.labels)
        if f.ndim != 2 or y.shape != (f.shape[0],):
            raise DomainError(f"features {f.shape} and labels {y.shape} do not line up")
        if self.n_classes < 2:
            raise DomainError("n_classes must be >= 2")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise DomainError("label out of range")
        if not np.all(np.isfinite(f)):
            raise DomainError("features contain non-finite values")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def equals(self, other: "DatasetSplit") -> bool:
        return (self.n_classes == other.n_classes
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))


# Calibrated by scripts/calibrate_overlap.py; see README.
DEFAULT_SPREAD = 3.0
DEFAULT_OVERLAP = 0.9


def _balanced_labels(n, n_classes, rng):
    return rng.permutation(np.arange(n) % n_classes)


def gen_synthetic(n_classes: int = 10, dim: int = 32, n_train: int = 5000, n_test: int = 1000,
                  class_spread: float = DEFAULT_SPREAD, overlap: float = DEFAULT_OVERLAP,
                  seed: int = 42) -> tuple[DatasetSplit, DatasetSplit]:
    """Isotropic Gaussian blobs around class centres on a sphere.

    Centres are random directions scaled to ``class_spread``; each sample is
    its centre plus N(0, overlap^2) noise. Features are rounded to float32 so
    that a stored split reloads bit-exactly.
    """
    if n_classes < 2 or dim < 2 or n_train < 1 or n_test < 1:
        raise DomainError("need n_classes >= 2, dim >= 2 and non-empty splits")
    if not class_spread > 0 or overlap < 0:
        raise DomainError("class_spread must be positive and overlap non-negative")
    rng = make_rng(seed)
    centers = rng.normal(size=(n_classes, dim))
    centers *= class_spread / np.linalg.norm(centers, axis=1, keepdims=True)

    def draw(n):
        labels = _balanced_labels(n, n_classes, rng)
        x = centers[labels] + overlap * rng.normal(size=(n, dim))
        return DatasetSplit(x.astype(np.float32).astype(np.float64),
                            labels.astype(np.int64), n_classes)

    return draw(n_train), draw(n_test)


def store_dataset(split: DatasetSplit, path) -> None:
    n, d = split.features.shape
    header = HEADER.pack(MAGIC, VERSION, n, d, split.n_classes)
    body = np.ascontiguousarray(split.features, dtype="<f4").tobytes()
    labels = np.ascontiguousarray(split.labels, dtype="<u2").tobytes()
    Path(path).write_bytes(header + body + labels)


def parse_dataset(data: bytes) -> DatasetSplit:
    if len(data) < 4 or data[:4] != MAGIC:
        raise ParseError("bad magic", 0)
    if len(data) < HEADER.size:
        raise ParseError("truncated header", len(data))
    _, version, n, d, k = HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    if k < 2:
        raise ParseError(f"n_classes {k} < 2", 14)
    feat_end = HEADER.size + 4 * n * d
    end = feat_end + 2 * n
    if len(data) < end:
        raise ParseError("truncated file", len(data))
    if len(data) > end:
        raise ParseError("trailing bytes", end)
    feats = np.frombuffer(data, dtype="<f4", count=n * d, offset=HEADER.size)
    labels = np.frombuffer(data, dtype="<u2", count=n, offset=feat_end)
    bad = np.flatnonzero(labels >= k)
    if bad.size:
        i = int(bad[0])
        raise ParseError(f"label {labels[i]} >= n_classes {k}", feat_end + 2 * i, record=i)
    nonfinite = np.flatnonzero(~np.isfinite(feats))
    if nonfinite.size:
        j = int(nonfinite[0])
        raise ParseError("non-finite feature", HEADER.size + 4 * j, record=j // max(d, 1))
    return DatasetSplit(feats.reshape(n, d).astype(np.float64), labels.astype(np.int64), int(k))


def load_dataset(path) -> DatasetSplit:
    return parse_dataset(Path(path).read_bytes())


def batches(split: DatasetSplit, batch_size: int, seed: int, epoch: int):
    """Yield ``(features, labels)`` over a seeded permutation; last short batch kept."""
    for idx in batch_indices(len(split), batch_size, seed, epoch):
        yield split.features[idx], split.labels[idx]


def batch_indices(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    if batch_size < 1:
        raise DomainError("batch_size must be >= 1")
    order = make_rng([seed, epoch]).permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]
