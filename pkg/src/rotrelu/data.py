"""Dataset loading (MNIST IDX, CIFAR binary), synthetic blobs and augmentation."""

from __future__ import annotations

import glob
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Tuple

import numpy as np

from .errors import InputError, ParseError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_PIXELS = 3 * 32 * 32
DATA_DIR_ENV = "RRELU_DATA_DIR"


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"
    stats: Optional[Tuple[np.ndarray, np.ndarray]] = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.images) == 0:
            raise InputError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise InputError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise InputError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: Optional[str] = None) -> "Dataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx], split=split or self.split)

    def halves(self) -> Tuple["Dataset", "Dataset"]:
        """Even-index and odd-index halves (deterministic held-out split)."""
        n = len(self)
        return self.subset(np.arange(0, n, 2), "heldout-a"), self.subset(np.arange(1, n, 2), "heldout-b")


def data_dir(explicit: Optional[str] = None) -> str:
    return explicit or os.environ.get(DATA_DIR_ENV) or os.path.join(os.getcwd(), "data")


# ---------------------------------------------------------------------- IDX

def _read(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def _check_magic(raw: bytes, expected: int, what: str) -> None:
    if len(raw) < 4:
        raise ParseError(f"IDX {what} header truncated")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected:
        raise ParseError(f"IDX {what} magic {magic}, expected {expected}")


def parse_idx_images(raw: bytes) -> np.ndarray:
    _check_magic(raw, IDX_IMAGES_MAGIC, "image")
    if len(raw) < 16:
        raise ParseError("IDX image header truncated")
    _, n, rows, cols = struct.unpack(">IIII", raw[:16])
    need = n * rows * cols
    if len(raw) - 16 < need:
        raise ParseError(f"IDX image payload truncated: {len(raw) - 16} of {need} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=16).reshape(n, rows, cols)


def parse_idx_labels(raw: bytes) -> np.ndarray:
    _check_magic(raw, IDX_LABELS_MAGIC, "label")
    if len(raw) < 8:
        raise ParseError("IDX label header truncated")
    _, n = struct.unpack(">II", raw[:8])
    if len(raw) - 8 < n:
        raise ParseError(f"IDX label payload truncated: {len(raw) - 8} of {n} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_mnist_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Read an IDX image/label pair; pixels scaled to [0, 1], shape (N, 1, 28, 28)."""
    images = parse_idx_images(_read(images_path))
    labels = parse_idx_labels(_read(labels_path))
    if len(images) != len(labels):
        raise ParseError(f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels")
    x = (images.astype(np.float32) / 255.0)[:, None]
    return Dataset(x, labels.astype(np.int64), 10, split)


def load_mnist(root: Optional[str] = None, split: str = "train") -> Dataset:
    root = data_dir(root)
    prefix = "train" if split == "train" else "t10k"
    for sub in ("", "mnist", "MNIST/raw"):
        base = os.path.join(root, sub)
        img = os.path.join(base, f"{prefix}-images-idx3-ubyte")
        if os.path.exists(img):
            return load_mnist_idx(img, os.path.join(base, f"{prefix}-labels-idx1-ubyte"), split)
    raise FileNotFoundError(f"no MNIST {split} IDX files under {root}")


# -------------------------------------------------------------------- CIFAR

def parse_cifar_records(raw: bytes, variant: str = "c10") -> Tuple[np.ndarray, np.ndarray]:
    """Split a CIFAR binary file into uint8 (N, 3, 32, 32) images and labels.

    CIFAR-10 records are ``label, 3072 pixels``; CIFAR-100 records are
    ``coarse, fine, 3072 pixels`` and the fine label is returned.
    """
    nlab = {"c10": 1, "c100": 2}[variant]
    rec = nlab + CIFAR_PIXELS
    if len(raw) == 0 or len(raw) % rec:
        raise ParseError(f"CIFAR file size {len(raw)} is not a multiple of the {rec}-byte record")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    return arr[:, nlab:].reshape(-1, 3, 32, 32), arr[:, nlab - 1].astype(np.int64)


def load_cifar_bin(directory, variant: str = "c10", split: str = "train") -> Dataset:
    if variant == "c10":
        pattern = "data_batch_*.bin" if split == "train" else "test_batch.bin"
    elif variant == "c100":
        pattern = "train.bin" if split == "train" else "test.bin"
    else:
        raise InputError(f"unknown CIFAR variant {variant!r}")
    files = sorted(glob.glob(os.path.join(directory, pattern)))
    if not files:
        raise FileNotFoundError(f"no {pattern} under {directory}")
    parts = [parse_cifar_records(_read(f), variant) for f in files]
    images = np.concatenate([p[0] for p in parts]).astype(np.float32) / 255.0
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, 10 if variant == "c10" else 100, split)


# ----------------------------------------------------------------- synthetic

def synthetic_blobs(n: int, shape, classes: int, separation: float = 4.0, seed=0) -> Dataset:
    """Gaussian clusters with unit noise; class centres are ``separation`` apart on average."""
    if n < 1 or classes < 1:
        raise InputError("synthetic_blobs needs n >= 1 and classes >= 1")
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    rng = np.random.default_rng(seed)
    dim = int(np.prod(shape))
    centres = rng.standard_normal((classes, dim))
    centres *= separation / np.sqrt(2 * dim)
    labels = rng.permutation(np.arange(n) % classes)
    x = centres[labels] + rng.standard_normal((n, dim))
    return Dataset(x.reshape((n,) + shape).astype(np.float32), labels.astype(np.int64), classes, "synthetic")


# --------------------------------------------------------------- transforms

def channel_stats(ds: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    x = ds.images
    axes = (0,) + tuple(range(2, x.ndim))
    return x.mean(axis=axes, dtype=np.float64), x.std(axis=axes, dtype=np.float64)


def standardize(ds: Dataset, stats: Tuple[np.ndarray, np.ndarray]) -> Dataset:
    """Apply per-channel ``(x - mean) / std`` computed elsewhere (normally on the train split)."""
    mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    shape = (1, -1) + (1,) * (ds.images.ndim - 2)
    x = (ds.images - mean.reshape(shape)) / np.maximum(std, 1e-12).reshape(shape)
    return replace(ds, images=x.astype(np.float32), stats=(mean, std))


def standardize_splits(train: Dataset, *others: Dataset):
    """Standardize ``train`` and ``others`` with statistics of ``train`` only."""
    stats = channel_stats(train)
    return (standardize(train, stats),) + tuple(standardize(o, stats) for o in others)


def augment(batch: np.ndarray, policy: str = "none", seed=0) -> np.ndarray:
    """``none`` or ``crop4+flip``: zero-pad 4, random crop back to size, flip with p=0.5."""
    if policy == "none":
        return batch
    if policy != "crop4+flip":
        raise InputError(f"unknown augmentation policy {policy!r}")
    rng = np.random.default_rng(seed)
    n, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (4, 4), (4, 4)))
    dy = rng.integers(0, 9, size=n)
    dx = rng.integers(0, 9, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(batch)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def iterate_batches(ds: Dataset, batch_size: int, seed=None, shuffle: bool = True
                    ) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    n = len(ds)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        yield ds.images[idx], ds.labels[idx]
