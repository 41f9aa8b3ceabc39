"""IDX dataset files and dataset utilities.

The IDX format is the classic big-endian container for image and label
sets: a magic number encoding the element type and rank, the dimension
sizes, then raw bytes.  The loaders validate everything they read and
raise a specific error per failure mode; gzip-compressed files are
detected and handled transparently.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803  # unsigned byte, rank 3
LABEL_MAGIC = 0x00000801  # unsigned byte, rank 1

IMAGE_FILES = ("train-images-idx3-ubyte", "t10k-images-idx3-ubyte")
LABEL_FILES = ("train-labels-idx1-ubyte", "t10k-labels-idx1-ubyte")


class DataFormatError(ValueError):
    """Base class for dataset file problems."""


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    """Image and label files disagree on the number of examples."""


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx_images(path) -> np.ndarray:
    """[N, H, W] uint8."""
    raw = _read_bytes(path)
    if len(raw) < 16:
        raise TruncatedFileError(f"{path}: header needs 16 bytes, file has {len(raw)}")
    magic, n, h, w = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise BadMagicError(f"{path}: magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")
    need = 16 + n * h * w
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: expected {need} bytes for {n} images, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=n * h * w, offset=16).reshape(n, h, w)


def load_idx_labels(path) -> np.ndarray:
    """[N] uint8."""
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: header needs 8 bytes, file has {len(raw)}")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise BadMagicError(f"{path}: magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")
    if len(raw) < 8 + n:
        raise TruncatedFileError(f"{path}: expected {8 + n} bytes for {n} labels, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8)


def save_idx_images(path, images: np.ndarray):
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, h, w))
        f.write(images.tobytes())


def save_idx_labels(path, labels: np.ndarray):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_split(data_dir, split: str):
    """One split as (images [N,1,H,W] float32 in [0,1], labels [N] int64).

    ``split`` is "train" or "test"; files follow the standard naming.
    """
    data_dir = Path(data_dir)
    img_name, lbl_name = {
        "train": (IMAGE_FILES[0], LABEL_FILES[0]),
        "test": (IMAGE_FILES[1], LABEL_FILES[1]),
    }[split]
    images = load_idx_images(_find(data_dir, img_name))
    labels = load_idx_labels(_find(data_dir, lbl_name))
    if len(images) != len(labels):
        raise CountMismatchError(
            f"{split}: {len(images)} images but {len(labels)} labels"
        )
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return x, labels.astype(np.int64)


def _find(data_dir: Path, name: str) -> Path:
    for candidate in (data_dir / name, data_dir / (name + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{data_dir / name}[.gz] not found; run scripts/fetch_mnist.py")


def batches(images, labels, batch_size: int, seed=None, shuffle: bool = True):
    """Yield (images, labels) batches in a deterministic order.

    ``seed`` may be an int or a ``numpy`` Generator; the permutation is a
    pure function of it.  The final short batch is retained, never dropped.
    ``shuffle=False`` keeps file order.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(images)
    if shuffle:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for lo in range(0, n, batch_size):
        sel = order[lo : lo + batch_size]
        yield images[sel], labels[sel]


def subset(images, labels, n: int, rng: np.random.Generator, stratified: bool = True):
    """Deterministic n-sample subset, class-balanced when stratified."""
    if n > len(images):
        raise ValueError(f"asked for {n} samples, dataset has {len(images)}")
    if n == len(images):
        return images, labels
    if not stratified:
        sel = rng.choice(len(images), size=n, replace=False)
        sel.sort()
        return images[sel], labels[sel]
    classes = np.unique(labels)
    per = n // len(classes)
    extra = n - per * len(classes)
    picks = []
    for i, c in enumerate(classes):
        pool = np.flatnonzero(labels == c)
        want = per + (1 if i < extra else 0)
        picks.append(rng.choice(pool, size=min(want, len(pool)), replace=False))
    sel = np.sort(np.concatenate(picks))
    return images[sel], labels[sel]
