"""Dataset ingestion: IDX image files and a synthetic stand-in generator."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049

# Standard file names inside a dataset directory (optionally .gz).
TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


def _open_maybe_gz(path: Path):
    gz = path.with_name(path.name + ".gz")
    if path.exists():
        return open(path, "rb")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise DataFormatError(f"missing dataset file {path} (or {gz.name})")


def _read_exact(fh, count: int, what: str, path) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise DataFormatError(f"{path}: truncated file while reading {what} "
                              f"({len(data)} of {count} bytes)")
    return data


def load_idx_images(path) -> np.ndarray:
    """Big-endian IDX3 images as float32 in [0, 1], shape (n, rows, cols, 1)."""
    path = Path(path)
    with _open_maybe_gz(path) as fh:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "header", path))
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(f"{path}: bad image magic {magic} "
                                  f"(expected {IDX_IMAGE_MAGIC})")
        raw = _read_exact(fh, n * rows * cols, "pixel data", path)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols, 1)
    return images.astype(np.float32) / 255.0


def load_idx_labels(path) -> np.ndarray:
    """Big-endian IDX1 labels as int64."""
    path = Path(path)
    with _open_maybe_gz(path) as fh:
        magic, n = struct.unpack(">II", _read_exact(fh, 8, "header", path))
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(f"{path}: bad label magic {magic} "
                                  f"(expected {IDX_LABEL_MAGIC})")
        raw = _read_exact(fh, n, "label data", path)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_idx_dataset(directory):
    """Load the four standard IDX files from ``directory``.

    Returns ((train_x, train_y), (test_x, test_y)); raises
    DataFormatError on missing/corrupt files or image/label count
    mismatches.
    """
    directory = Path(directory)
    train_x = load_idx_images(directory / TRAIN_IMAGES)
    train_y = load_idx_labels(directory / TRAIN_LABELS)
    test_x = load_idx_images(directory / TEST_IMAGES)
    test_y = load_idx_labels(directory / TEST_LABELS)
    if train_x.shape[0] != train_y.shape[0]:
        raise DataFormatError(f"{directory}: {train_x.shape[0]} train images vs "
                              f"{train_y.shape[0]} labels")
    if test_x.shape[0] != test_y.shape[0]:
        raise DataFormatError(f"{directory}: {test_x.shape[0]} test images vs "
                              f"{test_y.shape[0]} labels")
    return (train_x, train_y), (test_x, test_y)


def save_idx_dataset(directory, train, test) -> None:
    """Write (x, y) pairs as the four standard IDX files (uncompressed)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for (x, y), img_name, lab_name in (
            (train, TRAIN_IMAGES, TRAIN_LABELS),
            (test, TEST_IMAGES, TEST_LABELS)):
        x8 = np.clip(np.asarray(x) * 255.0, 0, 255).round().astype(np.uint8)
        n, rows, cols = x8.shape[0], x8.shape[1], x8.shape[2]
        with open(directory / img_name, "wb") as fh:
            fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
            fh.write(x8.tobytes())
        with open(directory / lab_name, "wb") as fh:
            fh.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
            fh.write(np.asarray(y, dtype=np.uint8).tobytes())


def make_synthetic(classes: int, dims: tuple[int, int, int], per_class: int,
                   rng: np.random.Generator, sigma: float = 0.1,
                   separation: float = 6.0):
    """Gaussian class-blob images, linearly separable by construction.

    Each class brightens its own block of pixels; block amplitude is set
    so any two class means sit ``separation * sigma`` apart, then
    isotropic noise of scale ``sigma`` is added. Returns (samples,
    labels) with samples float32 of shape (classes * per_class, *dims).
    Class means depend only on (classes, dims, sigma, separation), so
    independently generated train/test splits share them.
    """
    if classes < 2:
        raise ConfigError("synthetic dataset needs at least 2 classes")
    if per_class < 1:
        raise ConfigError("synthetic dataset needs per_class >= 1")
    flat = int(np.prod(dims))
    if classes > flat:
        raise ConfigError(f"{classes} classes do not fit {flat} pixels")
    block = flat // classes
    # || mean_i - mean_j || = amplitude * sqrt(2 * block) for i != j.
    amplitude = separation * sigma / np.sqrt(2 * block)
    base = 0.35
    means = np.full((classes, flat), base, dtype=np.float32)
    for c in range(classes):
        means[c, c * block:(c + 1) * block] += amplitude

    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    labels = labels[rng.permutation(n)]
    noise = rng.normal(0.0, sigma, size=(n, flat)).astype(np.float32)
    samples = np.clip(means[labels] + noise, 0.0, 1.0)
    return samples.reshape((n,) + tuple(dims)).astype(np.float32), labels.astype(np.int64)
