"""Datasets: CIFAR-10 binary batches, synthetic blob images, batching and splits."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import one_hot

RECORD_BYTES = 3073
CIFAR_SHAPE = (32, 32, 3)
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    classes: int
    tag: str = ""
    source_index: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, tag: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.classes, tag if tag is not None else self.tag)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(str((self.images.shape, self.classes)).encode())
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()


# -- CIFAR-10 binary format -------------------------------------------------

def parse_cifar_records(raw: bytes, classes: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Decode label byte + channel-planar 32x32 R/G/B records to ``(images, labels)``."""
    if len(raw) % RECORD_BYTES:
        raise DatasetFormatError(f"{len(raw)} bytes is not a whole number of {RECORD_BYTES}-byte records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() >= classes:
        raise DatasetFormatError(f"label {labels.max()} out of range for {classes} classes")
    planes = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return planes.astype(np.float64) / 255.0, labels


def encode_cifar_records(images: np.ndarray, labels: np.ndarray) -> bytes:
    """Inverse of :func:`parse_cifar_records`; pixel values are rounded to bytes."""
    images = np.asarray(images)
    if images.shape[1:] != CIFAR_SHAPE:
        raise ValueError(f"CIFAR records hold 32x32x3 images, got {images.shape[1:]}")
    px = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    rec = np.empty((len(images), RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = np.asarray(labels, dtype=np.uint8)
    rec[:, 1:] = px.transpose(0, 3, 1, 2).reshape(len(images), -1)
    return rec.tobytes()


def read_cifar_file(path) -> Dataset:
    images, labels = parse_cifar_records(Path(path).read_bytes())
    return Dataset(images, labels, 10, Path(path).stem)


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    """Load the five training batches and the test batch from ``directory``."""
    d = Path(directory)
    parts = [read_cifar_file(d / name) for name in TRAIN_FILES]
    train = Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]), 10, "train")
    test = read_cifar_file(d / TEST_FILE)
    test.tag = "test"
    return train, test


def write_cifar10(directory, train: Dataset, test: Dataset) -> None:
    """Write datasets as CIFAR-10 binary batches (train split into five files)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    chunks = np.array_split(np.arange(len(train)), len(TRAIN_FILES))
    for name, idx in zip(TRAIN_FILES, chunks):
        (d / name).write_bytes(encode_cifar_records(train.images[idx], train.labels[idx]))
    (d / TEST_FILE).write_bytes(encode_cifar_records(test.images, test.labels))


# -- synthetic data ---------------------------------------------------------

def synth_dataset(
    classes: int,
    n_per_class: int,
    height: int = 16,
    width: int = 16,
    channels: int = 3,
    seed: int = 0,
    noise: float = 0.25,
    jitter: float = 1.5,
    blobs: int = 2,
) -> Dataset:
    """Images of coloured Gaussian blobs whose positions and colours depend on the class.

    Each class owns ``blobs`` blob centres and colours drawn from ``seed``;
    every sample moves the centres by ``N(0, jitter)`` pixels, scales the
    amplitudes, and adds ``N(0, noise)`` pixel noise before clipping to
    ``[0, 1]``. ``noise`` and ``jitter`` set the difficulty.
    """
    rng = np.random.default_rng(seed)
    centres = rng.uniform([2, 2], [height - 3, width - 3], size=(classes, blobs, 2))
    colours = rng.uniform(0.2, 1.0, size=(classes, blobs, channels))
    radii = rng.uniform(1.5, 3.0, size=(classes, blobs))

    n = classes * n_per_class
    labels = np.repeat(np.arange(classes), n_per_class)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    images = np.zeros((n, height, width, channels))
    if n:
        c = centres[labels] + rng.normal(0.0, jitter, size=(n, blobs, 2))
        amp = rng.uniform(0.6, 1.0, size=(n, blobs, 1))
        d2 = (yy[None, None] - c[..., 0, None, None]) ** 2 + (xx[None, None] - c[..., 1, None, None]) ** 2
        g = np.exp(-d2 / (2.0 * radii[labels][..., None, None] ** 2))  # (n, blobs, H, W)
        images = np.einsum("nbhw,nbc->nhwc", g, colours[labels] * amp)
        images += rng.normal(0.0, noise, size=images.shape)
        images = np.clip(images, 0.0, 1.0)
        order = rng.permutation(n)
        images, labels = images[order], labels[order]
    return Dataset(images, labels, classes, "synthetic")


# -- batching and splits ----------------------------------------------------

def batch_indices(n: int, batch_size: int, rng: np.random.Generator | None = None):
    """Index arrays for one pass; shuffled when ``rng`` is given, last batch may be short."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batches(dataset: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True):
    """Yield ``(images, one_hot_labels)`` mini-batches."""
    rng = np.random.default_rng(seed) if shuffle else None
    for idx in batch_indices(len(dataset), batch_size, rng):
        yield dataset.images[idx], one_hot(dataset.labels[idx], dataset.classes)


def split(dataset: Dataset, val_fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Disjoint random train/validation split; validation gets ``round(N * val_fraction)`` samples."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    train, val = dataset.subset(train_idx, "train"), dataset.subset(val_idx, "val")
    train.source_index, val.source_index = train_idx, val_idx
    return train, val
