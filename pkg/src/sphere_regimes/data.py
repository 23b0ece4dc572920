"""Datasets: synthetic Gaussian blobs, IDX (MNIST-format) files, label noise."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int

    def __post_init__(self):
        for name in ("x_train", "x_test"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("y_train", "y_test"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
                raise ValueError(f"{name} has labels outside [0, {self.num_classes})")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.x_train.shape[0] != self.y_train.shape[0] or self.x_test.shape[0] != self.y_test.shape[0]:
            raise ValueError("inputs and labels disagree in length")

    @property
    def input_dim(self) -> int:
        return self.x_train.shape[1]

    @property
    def n_train(self) -> int:
        return self.x_train.shape[0]

    def same_as(self, other: "Dataset") -> bool:
        return (self.num_classes == other.num_classes
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("x_train", "y_train", "x_test", "y_test")))


def make_blobs(num_classes: int, samples_per_class: int, input_dim: int, separation: float,
               seed: int) -> Dataset:
    """One unit-variance Gaussian cluster per class, centres on a sphere of radius ``separation``.

    The split is stratified: the first 80% of each class (after shuffling)
    goes to training, the rest to test.
    """
    if not separation > 0:
        raise ValueError("separation must be positive")
    if num_classes < 2 or samples_per_class < 5:
        raise ValueError("need at least 2 classes and 5 samples per class")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, input_dim))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    n_train = int(round(0.8 * samples_per_class))
    xs_tr, ys_tr, xs_te, ys_te = [], [], [], []
    for c in range(num_classes):
        pts = centers[c] + rng.standard_normal((samples_per_class, input_dim))
        xs_tr.append(pts[:n_train])
        xs_te.append(pts[n_train:])
        ys_tr.append(np.full(n_train, c))
        ys_te.append(np.full(samples_per_class - n_train, c))
    x_tr, y_tr = np.concatenate(xs_tr), np.concatenate(ys_tr)
    x_te, y_te = np.concatenate(xs_te), np.concatenate(ys_te)
    perm_tr = rng.permutation(len(y_tr))
    perm_te = rng.permutation(len(y_te))
    return Dataset(x_tr[perm_tr], y_tr[perm_tr], x_te[perm_te], y_te[perm_te], num_classes)


def _read_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file too short for a magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise IdxTruncatedError(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair into the training split of a Dataset.

    Pixels are scaled to [0, 1] and each image is flattened to one row.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    empty_x = np.zeros((0, x.shape[1]))
    return Dataset(x, labels.astype(np.int64), empty_x, np.zeros(0, dtype=np.int64), num_classes)


def load_mnist(train_images, train_labels, test_images, test_labels, num_classes: int = 10) -> Dataset:
    train = load_idx(train_images, train_labels, num_classes)
    test = load_idx(test_images, test_labels, num_classes)
    return Dataset(train.x_train, train.y_train, test.x_train, test.y_train, num_classes)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (used for fixtures and round trips)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {1: IDX_LABELS_MAGIC, 3: IDX_IMAGES_MAGIC}[array.ndim]
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def inject_label_noise(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Resample floor(fraction * N) training labels uniformly over all classes.

    A resampled label may coincide with the original one. Test labels are untouched.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    n = dataset.n_train
    k = int(np.floor(fraction * n))
    if k == 0:
        return dataset
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=k, replace=False)
    labels = np.array(dataset.y_train)
    labels[idx] = rng.integers(0, dataset.num_classes, size=k)
    return replace(dataset, y_train=labels)


def noisy_indices(clean: Dataset, noisy: Dataset) -> np.ndarray:
    return np.flatnonzero(clean.y_train != noisy.y_train)
