"""CIFAR-10 binary loader, small-data subsets and augmentation."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
NUM_CLASSES = 10
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)

# training-set size -> epoch multiplier for the small-data regime
EPOCH_MULTIPLIERS = {520: 10, 1030: 5, 5120: 2}


class CifarFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Images as float32 in [0, 1], shape (N, 3, 32, 32); integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise ValueError("labels must lie in [0, 9]")

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.split)


def parse_cifar_bytes(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Decode records of 1 label byte + 3072 pixel bytes (R, G, B planes, row-major)."""
    if len(raw) % RECORD_BYTES:
        raise CifarFormatError(f"{source}: length {len(raw)} is not a multiple of {RECORD_BYTES}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise CifarFormatError(f"{source}: record {bad[0]} has label byte {labels[bad[0]]} > 9")
    return rec[:, 1:].reshape(-1, *IMAGE_SHAPE), labels


def read_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        return parse_cifar_bytes(fh.read(), path)


def _load_split(root: str, files, split: str) -> Dataset:
    parts = []
    for name in files:
        path = os.path.join(root, name)
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing CIFAR-10 file {path}")
        parts.append(read_cifar_file(path))
    pixels = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset((pixels / np.float32(255.0)).astype(np.float32), labels, split)


def load_cifar10(root: str) -> tuple[Dataset, Dataset]:
    """Parse every file before returning, so a bad file never yields a partial dataset."""
    return _load_split(root, TRAIN_FILES, "train"), _load_split(root, TEST_FILES, "test")


def subset_small_data(train: Dataset, images_per_class: int, seed: int = 0) -> Dataset:
    """Class-balanced subset drawn without replacement; the order is shuffled."""
    if images_per_class < 1:
        raise ValueError("images_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(NUM_CLASSES):
        pool = np.flatnonzero(train.labels == c)
        if pool.size < images_per_class:
            raise ValueError(f"class {c} has only {pool.size} images, need {images_per_class}")
        chosen.append(rng.choice(pool, size=images_per_class, replace=False))
    idx = np.concatenate(chosen)
    return train.take(rng.permutation(idx))


def epoch_multiplier(n_train: int) -> int:
    return EPOCH_MULTIPLIERS.get(n_train, 1)


def shift_flip(images: np.ndarray, dx: np.ndarray, dy: np.ndarray, flip: np.ndarray) -> np.ndarray:
    """Translate each image by (dx, dy) pixels with zero fill, then mirror where ``flip``.

    Positive dx moves content right, positive dy moves it down.
    """
    n, _, h, w = images.shape
    out = np.zeros_like(images)
    for i in range(n):
        x0, y0 = int(dx[i]), int(dy[i])
        src = images[i, :, max(0, -y0) : h - max(0, y0), max(0, -x0) : w - max(0, x0)]
        out[i, :, max(0, y0) : max(0, y0) + src.shape[1], max(0, x0) : max(0, x0) + src.shape[2]] = src
        if flip[i]:
            out[i] = out[i, :, :, ::-1]
    return out


def augment(images: np.ndarray, rng: np.random.Generator, max_shift: int = 4) -> np.ndarray:
    """Random integer shifts in [-max_shift, max_shift] and horizontal flips with p = 0.5."""
    n = images.shape[0]
    dx = rng.integers(-max_shift, max_shift + 1, size=n)
    dy = rng.integers(-max_shift, max_shift + 1, size=n)
    flip = rng.random(n) < 0.5
    return shift_flip(images, dx, dy, flip)


def batches(n: int, batch: int, rng: np.random.Generator | None = None, drop_last: bool = True):
    """Index arrays for one epoch; shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    stop = n - n % batch if drop_last and n >= batch else n
    for i in range(0, stop, batch):
        yield order[i : i + batch]
