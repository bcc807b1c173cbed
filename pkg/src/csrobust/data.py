"""Datasets: MNIST IDX and CIFAR10 binary loaders, synthetic blobs, fold splits."""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numcore import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray  # (N, d) in [0, 1]
    y: np.ndarray  # (N,) ints in [0, m)
    n_classes: int
    provenance: str = ""

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise DataFormatError("examples and labels disagree in count")
        if self.X.size and (self.X.min() < 0 or self.X.max() > 1):
            raise DataFormatError("feature values must lie in [0, 1]")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise DataFormatError("labels out of range")

    def __len__(self):
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)

    def subset(self, idx, provenance=None) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.n_classes, provenance or self.provenance)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for x, label in zip(self.X, self.y):
                w.writerow([int(label)] + [repr(float(v)) for v in x])


def _read(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx_images(path) -> np.ndarray:
    raw = _read(path)
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated IDX header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{path}: wrong magic {magic:#010x} for an image file")
    payload = raw[16:]
    if len(payload) != n * rows * cols:
        raise DataFormatError(f"{path}: expected {n * rows * cols} pixel bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(n, rows * cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read(path)
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated IDX header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{path}: wrong magic {magic:#010x} for a label file")
    payload = raw[8:]
    if len(payload) != n:
        raise DataFormatError(f"{path}: expected {n} labels, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8)


def write_idx_images(path, pixels: np.ndarray, rows=28, cols=28):
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(pixels), rows * cols)
    data = struct.pack(">IIII", IDX_IMAGES_MAGIC, len(pixels), rows, cols) + pixels.tobytes()
    Path(path).write_bytes(gzip.compress(data, mtime=0) if str(path).endswith(".gz") else data)


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    data = struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes()
    Path(path).write_bytes(gzip.compress(data, mtime=0) if str(path).endswith(".gz") else data)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Pixels scaled by 1/255 into [0, 1]; gzipped files are accepted too."""
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(pixels) != len(labels):
        raise DataFormatError(f"{len(pixels)} images but {len(labels)} labels")
    if labels.size and labels.max() >= 10:
        raise DataFormatError("MNIST labels must be digits")
    return Dataset(pixels / 255.0, labels.astype(np.int64), 10, f"mnist:{Path(images_path).name}")


def load_cifar10(paths) -> Dataset:
    """CIFAR10 binary batches: records of 1 label byte + 3072 channel-major pixel bytes."""
    xs, ys = [], []
    for p in paths:
        raw = _read(p)
        if len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{p}: size is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        ys.append(rec[:, 0])
        xs.append(rec[:, 1:])
    y = np.concatenate(ys).astype(np.int64)
    if y.size and y.max() >= 10:
        raise DataFormatError("CIFAR10 labels must be < 10")
    return Dataset(np.concatenate(xs) / 255.0, y, 10, "cifar10")


def load_csv_dataset(path, n_classes=None) -> Dataset:
    """Rows of ``label, feature, feature, ...``."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    try:
        y = np.array([int(r[0]) for r in rows], dtype=np.int64)
        X = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    m = int(n_classes) if n_classes is not None else int(y.max()) + 1
    return Dataset(X, y, m, f"csv:{Path(path).name}")


def blob_means(m, d):
    """Class means on a regular grid inside [0.2, 0.8]^d, first ``m`` grid points."""
    per_axis = max(2, math.ceil(m ** (1.0 / d)))
    ticks = np.linspace(0.2, 0.8, per_axis)
    means = np.zeros((m, d))
    for c in range(m):
        rem = c
        for axis in range(d - 1, -1, -1):
            means[c, axis] = ticks[rem % per_axis]
            rem //= per_axis
    return means


def synth_blobs(rng: Rng, m: int, d: int, per_class: int, spread: float) -> Dataset:
    """Isotropic Gaussian blobs clipped to [0, 1]."""
    if m < 2 or d < 1:
        raise ValueError("need m >= 2 and d >= 1")
    means = blob_means(m, d)
    y = np.repeat(np.arange(m), per_class)
    X = means[y] + rng.normal(0.0, 1.0, size=(len(y), d)) * spread
    order = rng.permutation(len(y))
    return Dataset(np.clip(X[order], 0.0, 1.0), y[order], m, f"blobs(m={m},d={d},spread={spread})")


@dataclass
class FoldSplit:
    assignment: np.ndarray  # fold index per example
    k: int
    validation_fold: int = 0

    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)

    def val_indices(self) -> np.ndarray:
        return np.flatnonzero(self.assignment == self.validation_fold)

    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(self.assignment != self.validation_fold)


def split_folds(data, k: int = 5, rng: Rng | None = None, validation_fold: int = 0) -> FoldSplit:
    """Seeded shuffle, then contiguous runs of near-equal size.

    ``data`` is a :class:`Dataset` or an example count.
    """
    n = len(data) if isinstance(data, Dataset) else int(data)
    if rng is None:
        raise ValueError("split_folds needs an explicit Rng")
    if k < 2:
        raise ValueError("need at least two folds")
    if n < k:
        raise ValueError(f"cannot split {n} examples into {k} folds")
    if not 0 <= validation_fold < k:
        raise ValueError("validation fold out of range")
    order = rng.permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    bounds = np.linspace(0, n, k + 1).round().astype(int)
    for f in range(k):
        assignment[order[bounds[f]:bounds[f + 1]]] = f
    return FoldSplit(assignment, k, validation_fold)


def stratified_subsample(ds: Dataset, n: int, rng: Rng, exclude=None) -> np.ndarray:
    """Indices of ``n`` examples with near-equal class counts, avoiding ``exclude``."""
    pool = np.ones(len(ds), dtype=bool)
    if exclude is not None:
        pool[np.asarray(exclude, dtype=int)] = False
    picks = []
    per = [n // ds.n_classes + (c < n % ds.n_classes) for c in range(ds.n_classes)]
    for c in range(ds.n_classes):
        idx = np.flatnonzero(pool & (ds.y == c))
        if len(idx) < per[c]:
            raise ValueError(f"class {c} has only {len(idx)} examples, need {per[c]}")
        picks.append(rng.choice(idx, size=per[c], replace=False))
    out = np.concatenate(picks)
    return out[rng.permutation(len(out))]
