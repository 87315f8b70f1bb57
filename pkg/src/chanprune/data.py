"""Datasets: CIFAR-10 binary batches and seeded synthetic class blobs."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DatasetError, InvalidArgument

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_RECORDS_PER_FILE = 10000


@dataclass
class Dataset:
    x: np.ndarray  # [N, H, W, C] float32
    y: np.ndarray  # [N] int64

    def __len__(self):
        return len(self.y)

    def __getitem__(self, idx) -> Dataset:
        return Dataset(self.x[idx], self.y[idx])


def _cifar_dir(data_dir) -> str:
    nested = os.path.join(data_dir, "cifar-10-batches-bin")
    if not os.path.exists(os.path.join(data_dir, CIFAR_TEST_FILE)) and os.path.isdir(nested):
        return nested
    return str(data_dir)


def read_cifar_batch(path, expected_records: int | None = CIFAR_RECORDS_PER_FILE) -> tuple[np.ndarray, np.ndarray]:
    """Raw ``(uint8 NHWC images, labels)`` from one binary batch file."""
    if not os.path.isfile(path):
        raise DatasetError(f"missing CIFAR-10 file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    full, rem = divmod(raw.size, CIFAR_RECORD)
    if rem:
        raise DatasetError(f"{path}: truncated record at index {full} "
                           f"({rem} of {CIFAR_RECORD} bytes present)")
    if expected_records is not None and full != expected_records:
        raise DatasetError(f"{path}: truncated file, record {full} missing "
                           f"(expected {expected_records} records)")
    rec = raw.reshape(full, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DatasetError(f"{path}: record {bad[0]} has label {labels[bad[0]]} > 9")
    images = rec[:, 1:].reshape(full, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def normalize_cifar(images_u8: np.ndarray) -> np.ndarray:
    mean = np.asarray(CIFAR_MEAN, dtype=np.float32)
    std = np.asarray(CIFAR_STD, dtype=np.float32)
    return ((images_u8.astype(np.float32) / np.float32(255.0)) - mean) / std


def load_cifar10(data_dir, expected_records: int | None = CIFAR_RECORDS_PER_FILE) -> tuple[Dataset, Dataset]:
    """Train (5 batch files) and test (``test_batch.bin``) sets, normalized NHWC."""
    root = _cifar_dir(data_dir)
    xs, ys = [], []
    for name in CIFAR_TRAIN_FILES:
        img, lab = read_cifar_batch(os.path.join(root, name), expected_records)
        xs.append(img)
        ys.append(lab)
    test_img, test_lab = read_cifar_batch(os.path.join(root, CIFAR_TEST_FILE), expected_records)
    train = Dataset(normalize_cifar(np.concatenate(xs)), np.concatenate(ys))
    return train, Dataset(normalize_cifar(test_img), test_lab)


def write_cifar_batch(path, images_u8: np.ndarray, labels) -> None:
    """Write NHWC uint8 images in the CIFAR-10 binary record layout."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    chw = images_u8.transpose(0, 3, 1, 2).reshape(len(labels), -1)
    np.concatenate([labels[:, None], chw], axis=1).tofile(path)


def synth_dataset(seed: int, n: int, classes: int, shape=(32, 32, 3), separation: float = 1.0,
                  grain: int = 8) -> Dataset:
    """Gaussian noise around one smooth random prototype image per class.

    Prototypes are ``grain``-pixel blocks of N(0, separation^2) values; the
    noise is N(0, 1) per pixel. Labels are balanced and shuffled.
    """
    if classes < 1 or n < classes:
        raise InvalidArgument(f"need n >= classes >= 1, got n={n}, classes={classes}")
    h, w, c = shape
    rng = np.random.default_rng(seed)
    coarse = rng.normal(0.0, separation, size=(classes, -(-h // grain), -(-w // grain), c))
    protos = coarse.repeat(grain, axis=1).repeat(grain, axis=2)[:, :h, :w, :]
    y = rng.permutation(np.arange(n) % classes)
    x = protos[y] + rng.normal(size=(n, h, w, c))
    return Dataset(x.astype(np.float32), y.astype(np.int64))


def select_classes(ds: Dataset, classes) -> Dataset:
    """Keep only ``classes`` and relabel them ``0..k-1`` in the given order."""
    classes = list(classes)
    mapping = np.full(max(max(classes), int(ds.y.max())) + 1, -1, dtype=np.int64)
    mapping[classes] = np.arange(len(classes))
    keep = np.isin(ds.y, classes)
    return Dataset(ds.x[keep], mapping[ds.y[keep]])


def subsample(ds: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Class-stratified deterministic subset of ``round(fraction * n_c)`` per class."""
    if not 0 < fraction <= 1:
        raise InvalidArgument("fraction must be in (0, 1]")
    if fraction == 1:
        return ds
    rng = np.random.default_rng(seed)
    picks = []
    for c in np.unique(ds.y):
        idx = np.flatnonzero(ds.y == c)
        k = max(1, int(round(fraction * idx.size)))
        picks.append(np.sort(rng.permutation(idx)[:k]))
    keep = np.sort(np.concatenate(picks))
    return ds[keep]
