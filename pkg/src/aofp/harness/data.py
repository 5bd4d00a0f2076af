"""Dataset ingestion and deterministic train/assessment/eval splits."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..trainer import Dataset

IDX_TYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
CIFAR_RECORD = 1 + 32 * 32 * 3


class DataFormatError(ValueError):
    pass


@dataclass
class DatasetDescriptor:
    kind: str = "digits"  # idx | cifar-bin | synthetic | digits
    paths: list = field(default_factory=list)  # idx: [images, labels]; cifar-bin: batch files
    n_eval: int = 400
    n_assess: int = 300  # gamma, drawn from the training split
    n_train: int | None = None  # cap on training examples after the eval split
    seed: int = 0
    # synthetic only
    shape: tuple = (8, 8, 1)
    classes: int = 4
    n_total: int = 2000
    noise: float = 0.3

    def __post_init__(self):
        self.shape = tuple(self.shape)
        self.paths = [str(p) for p in self.paths]


@dataclass
class Splits:
    train: Dataset
    assess: Dataset
    eval: Dataset
    assess_index: np.ndarray  # positions of the assessment examples inside train


# --------------------------------------------------------------------------
# raw formats


def read_idx(path):
    """Parse an IDX file (MNIST style) into an ndarray of its declared shape."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: too short for an IDX header")
    zero, code, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zero != 0 or code not in IDX_TYPES or ndim == 0:
        raise DataFormatError(f"{path}: bad IDX magic {raw[:4].hex()}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataFormatError(f"{path}: truncated IDX dimensions")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    dtype = np.dtype(IDX_TYPES[code])
    need = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - head != need:
        raise DataFormatError(f"{path}: expected {need} data bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=dtype, offset=head).reshape(dims)


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def read_cifar_bin(path):
    """One CIFAR-10 binary batch -> (images (N, 32, 32, 3) uint8, labels (N,))."""
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise DataFormatError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataFormatError(f"{path}: label byte above 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def synthetic(shape=(8, 8, 1), classes=4, n=2000, noise=0.3, seed=0):
    """Seeded class-prototype images plus Gaussian noise; linearly separable at low noise."""
    rng = np.random.default_rng(seed)
    protos = rng.uniform(0, 1, (classes, *shape))
    y = rng.integers(0, classes, n)
    x = protos[y] + noise * rng.standard_normal((n, *shape))
    return x.astype(np.float32), y


def digits():
    from sklearn.datasets import load_digits

    d = load_digits()
    return (d.images[..., None] / 16.0).astype(np.float32), d.target.astype(np.int64)


# --------------------------------------------------------------------------


def _load_raw(desc):
    if desc.kind == "idx":
        if len(desc.paths) != 2:
            raise DataFormatError("idx datasets need [images, labels] paths")
        images, labels = read_idx(desc.paths[0]), read_idx(desc.paths[1])
        if images.ndim == 3:
            images = images[..., None]
        if len(images) != len(labels):
            raise DataFormatError("image and label counts differ")
        return images.astype(np.float32) / 255.0, labels.astype(np.int64)
    if desc.kind == "cifar-bin":
        if not desc.paths:
            raise DataFormatError("cifar-bin needs at least one batch file")
        parts = [read_cifar_bin(p) for p in desc.paths]
        x = np.concatenate([p[0] for p in parts]).astype(np.float32) / 255.0
        return x, np.concatenate([p[1] for p in parts])
    if desc.kind == "synthetic":
        return synthetic(tuple(desc.shape), desc.classes, desc.n_total, desc.noise, desc.seed)
    if desc.kind == "digits":
        return digits()
    raise DataFormatError(f"unknown dataset kind {desc.kind!r}")


def load_dataset(desc):
    """Shuffle once with ``desc.seed``, carve off eval, then pick gamma assessment examples from train."""
    x, y = _load_raw(desc)
    rng = np.random.default_rng(desc.seed)
    order = rng.permutation(len(y))
    if desc.n_eval >= len(y):
        raise DataFormatError(f"eval split of {desc.n_eval} leaves no training data")
    ev, tr = order[: desc.n_eval], order[desc.n_eval :]
    if desc.n_train is not None:
        tr = tr[: desc.n_train]
    if not 0 < desc.n_assess <= len(tr):
        raise DataFormatError(f"assessment size {desc.n_assess} must be in (0, {len(tr)}]")
    assess_pos = np.sort(rng.choice(len(tr), desc.n_assess, replace=False))
    train = Dataset(x[tr], y[tr])
    return Splits(train, train.subset(assess_pos), Dataset(x[ev], y[ev]), assess_pos)
