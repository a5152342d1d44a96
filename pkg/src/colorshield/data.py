"""Dataset loading: MNIST IDX files, CIFAR-10 binary batches, and a bundled
handwritten-digits fallback for network-free environments.

Loaded images are RGB Images in [0,1] with pixel values exactly byte/255.
MNIST rasters are zero-padded from 28x28 to 32x32 and gray is replicated to
three channels. The dataset root comes from the COLORSHIELD_DATA environment
variable unless a path is given explicitly.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "Dataset",
    "DataError",
    "BadMagicError",
    "TruncatedFileError",
    "load_mnist",
    "load_cifar10",
    "load_builtin_digits",
    "stratified_subset",
    "data_root",
]

DATA_ENV = "COLORSHIELD_DATA"

_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801
_CIFAR_RECORD = 3073


class DataError(ValueError):
    """Base class for dataset format problems."""


class BadMagicError(DataError):
    """File does not start with the expected magic number."""


class TruncatedFileError(DataError):
    """File ends before the declared payload."""


@dataclass
class Dataset:
    images: np.ndarray  # [N,H,W,3] float32 in [0,1], RGB
    labels: np.ndarray  # [N] int64
    split: str
    source: str

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError("Dataset: images/labels length mismatch")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


def data_root(path=None) -> Path:
    if path is not None:
        return Path(path)
    root = os.environ.get(DATA_ENV)
    if not root:
        raise DataError(f"data_root: set {DATA_ENV} or pass a path")
    return Path(root)


def _read_exact(fh, n: int, path, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"{path}: truncated {what} (wanted {n} bytes, got {len(buf)})")
    return buf


def _read_idx(path, expect_magic: int) -> np.ndarray:
    with open(path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, path, "magic"))
        if magic != expect_magic:
            raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", _read_exact(fh, 4 * ndim, path, "dimensions"))
        count = int(np.prod(dims))
        payload = _read_exact(fh, count, path, "payload")
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist(path=None, split: str = "train") -> Dataset:
    """Parse big-endian IDX files; pads 28x28 to 32x32, gray to 3 channels."""
    if split not in _MNIST_FILES:
        raise ValueError(f"load_mnist: split must be train/test, got {split!r}")
    root = data_root(path)
    img_name, lbl_name = _MNIST_FILES[split]
    raw = _read_idx(root / img_name, _IDX_IMAGE_MAGIC)
    labels = _read_idx(root / lbl_name, _IDX_LABEL_MAGIC)
    if raw.ndim != 3:
        raise DataError(f"load_mnist: image file has {raw.ndim} dims, expected 3")
    if len(raw) != len(labels):
        raise DataError(f"load_mnist: {len(raw)} images vs {len(labels)} labels")
    pad = (32 - raw.shape[1]) // 2, (32 - raw.shape[2]) // 2
    gray = np.pad(raw, ((0, 0), (pad[0], 32 - raw.shape[1] - pad[0]), (pad[1], 32 - raw.shape[2] - pad[1])))
    images = (gray.astype(np.float32) / np.float32(255.0))[..., None].repeat(3, axis=-1)
    return Dataset(images=images, labels=labels.astype(np.int64), split=split, source="mnist-idx")


_CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


def load_cifar10(path=None, split: str = "train") -> Dataset:
    """Parse 3073-byte records: 1 label byte + 3 channel-planar 1024-byte planes."""
    if split not in _CIFAR_FILES:
        raise ValueError(f"load_cifar10: split must be train/test, got {split!r}")
    root = data_root(path)
    images = []
    labels = []
    for name in _CIFAR_FILES[split]:
        blob = (root / name).read_bytes()
        if len(blob) % _CIFAR_RECORD != 0:
            raise DataError(f"{root / name}: size {len(blob)} not a multiple of {_CIFAR_RECORD}")
        records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
        labels.append(records[:, 0].astype(np.int64))
        planes = records[:, 1:].reshape(-1, 3, 32, 32)
        images.append(np.transpose(planes, (0, 2, 3, 1)))
    labels = np.concatenate(labels)
    if labels.max() > 9:
        raise DataError(f"load_cifar10: label {labels.max()} out of range")
    images = np.concatenate(images).astype(np.float32) / np.float32(255.0)
    return Dataset(images=images, labels=labels, split=split, source="cifar10-bin")


def load_builtin_digits(size: int = 16, train_fraction: float = 0.75, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Bundled 8x8 handwritten digits upsampled to size x size RGB.

    Offline stand-in for MNIST when no IDX files are available; the split is
    seeded and stratified.
    """
    from sklearn.datasets import load_digits

    raw = load_digits()
    gray = (raw.images / 16.0).astype(np.float32)
    xt = Tensor(gray[:, None])
    up = ad.resize_bilinear(xt, size, size).data
    images = np.clip(up, 0.0, 1.0)[:, 0][..., None].repeat(3, axis=-1)
    labels = raw.target.astype(np.int64)

    rng = np.random.default_rng(seed)
    train_idx = []
    test_idx = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        cut = int(round(train_fraction * len(idx)))
        train_idx.extend(idx[:cut])
        test_idx.extend(idx[cut:])
    train_idx = np.sort(np.array(train_idx))
    test_idx = np.sort(np.array(test_idx))
    return (
        Dataset(images[train_idx], labels[train_idx], split="train", source="builtin-digits"),
        Dataset(images[test_idx], labels[test_idx], split="test", source="builtin-digits"),
    )


def stratified_subset(dataset: Dataset, size: int, seed: int) -> Dataset:
    """Seeded class-stratified subset; remainder classes chosen round-robin."""
    if size > len(dataset):
        raise ValueError(f"stratified_subset: size {size} > dataset {len(dataset)}")
    rng = np.random.default_rng(seed)
    classes = np.unique(dataset.labels)
    per = size // len(classes)
    rem = size - per * len(classes)
    chosen = []
    for i, cls in enumerate(classes):
        idx = np.flatnonzero(dataset.labels == cls)
        take = per + (1 if i < rem else 0)
        if take > len(idx):
            raise ValueError(f"stratified_subset: class {cls} has only {len(idx)} items")
        chosen.append(rng.choice(idx, size=take, replace=False))
    chosen = np.sort(np.concatenate(chosen))
    return Dataset(
        dataset.images[chosen],
        dataset.labels[chosen],
        split=dataset.split,
        source=dataset.source,
    )
