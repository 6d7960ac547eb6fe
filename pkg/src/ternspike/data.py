"""Dataset ingestion: IDX (MNIST / Fashion-MNIST) and CIFAR-10 binary files.

Nothing is ever downloaded; every loader takes user-supplied paths.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, FormatError

IDX_LABELS = 0x00000801
IDX_IMAGES = 0x00000803


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def parse_idx(buf: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX blob into a uint8 array of its declared shape."""
    if len(buf) < 4:
        raise FormatError("truncated magic number", len(buf))
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic not in (IDX_LABELS, IDX_IMAGES):
        raise FormatError(f"bad IDX magic 0x{magic:08x}", 0)
    rank = magic & 0xFF
    header = 4 + 4 * rank
    if len(buf) < header:
        raise FormatError("truncated dimension header", len(buf))
    dims = struct.unpack_from(f">{rank}I", buf, 4)
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) < header + count:
        raise FormatError(f"truncated data: expected {count} bytes", len(buf))
    if len(buf) > header + count:
        raise FormatError(f"{len(buf) - header - count} trailing bytes after data", header + count)
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(path) -> np.ndarray:
    """Load an IDX file (optionally gzipped).

    Image files (rank 3) come back as float32 ``(N, 1, H, W)`` scaled to
    ``[0, 1]``; label files as an int64 vector.
    """
    raw = parse_idx(_read_bytes(path))
    if raw.ndim == 1:
        return raw.astype(np.int64)
    return (raw.astype(np.float32) / np.float32(255.0))[:, None, :, :]


def write_idx(path, array) -> None:
    """Write a uint8 array as IDX (rank 1 labels or rank 3 images)."""
    arr = np.asarray(array, dtype=np.uint8)
    if arr.ndim not in (1, 3):
        raise ValueError(f"IDX writer supports rank 1 or 3, got {arr.ndim}")
    magic = IDX_LABELS if arr.ndim == 1 else IDX_IMAGES
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar10_binary(path):
    """Parse a CIFAR-10 binary batch: 1 label byte + 3072 pixel bytes per record."""
    buf = _read_bytes(path)
    if len(buf) % CIFAR_RECORD:
        whole = len(buf) // CIFAR_RECORD * CIFAR_RECORD
        raise FormatError(f"truncated CIFAR-10 record (file size {len(buf)})", whole)
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"label {labels[bad]} out of range", bad * CIFAR_RECORD)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return images, labels


@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Split":
        return Split(self.images[:n], self.labels[:n])


@dataclass
class DatasetHandle:
    """Standardized train/test splits plus the constants used to standardize."""

    name: str
    train: Split
    test: Split
    mean: float
    std: float
    num_classes: int = 10

    @property
    def input_shape(self) -> tuple:
        return tuple(self.train.images.shape[1:])

    @classmethod
    def from_arrays(cls, name, train_images, train_labels, test_images, test_labels, num_classes=10):
        """Standardize ``[0,1]`` images with statistics of the training split."""
        mean = float(train_images.mean())
        std = float(train_images.std()) or 1.0
        norm = lambda x: ((x - np.float32(mean)) / np.float32(std)).astype(np.float32)  # noqa: E731
        for labels in (train_labels, test_labels):
            if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
                raise ConfigurationError(f"labels outside [0, {num_classes})")
        return cls(
            name,
            Split(norm(train_images), np.asarray(train_labels, dtype=np.int64)),
            Split(norm(test_images), np.asarray(test_labels, dtype=np.int64)),
            mean,
            std,
            num_classes,
        )


_IDX_NAMES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _find(directory: Path, stem: str) -> Path:
    for candidate in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        p = directory / candidate
        if p.exists():
            return p
    raise ConfigurationError(f"{stem}[.gz] not found in {directory}")


def load_mnist(directory, name: str = "mnist") -> DatasetHandle:
    """Load MNIST or Fashion-MNIST from a directory holding the four IDX files."""
    d = Path(directory)
    parts = {k: load_idx(_find(d, v)) for k, v in _IDX_NAMES.items()}
    for split in ("train", "test"):
        n_img, n_lab = len(parts[f"{split}_images"]), len(parts[f"{split}_labels"])
        if n_img != n_lab:
            raise ConfigurationError(f"{split} split: {n_img} images but {n_lab} labels")
    return DatasetHandle.from_arrays(
        name, parts["train_images"], parts["train_labels"], parts["test_images"], parts["test_labels"]
    )


def load_cifar10(directory) -> DatasetHandle:
    d = Path(directory)
    train = [load_cifar10_binary(d / f"data_batch_{i}.bin") for i in range(1, 6)]
    test_images, test_labels = load_cifar10_binary(d / "test_batch.bin")
    return DatasetHandle.from_arrays(
        "cifar10",
        np.concatenate([t[0] for t in train]),
        np.concatenate([t[1] for t in train]),
        test_images,
        test_labels,
    )


def load_dataset(name: str, directory: Optional[str] = None) -> DatasetHandle:
    directory = directory or os.environ.get("TERNSPIKE_DATA")
    if not directory:
        raise ConfigurationError("no dataset directory given (use --data or set TERNSPIKE_DATA)")
    if name in ("mnist", "fashion-mnist"):
        return load_mnist(directory, name)
    if name == "cifar10":
        return load_cifar10(directory)
    raise ConfigurationError(f"unknown dataset {name!r}; choose mnist, fashion-mnist or cifar10")
