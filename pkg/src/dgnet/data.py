"""Datasets: CIFAR-10 binary batches and a seeded synthetic image task."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616])


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [M, C, H, W]
    labels: np.ndarray  # [M]
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise DatasetError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0,{self.num_classes})")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, dict(self.meta))

    def split(self, n_eval: int, seed: int = 0) -> tuple[Dataset, Dataset]:
        """Disjoint (train, eval) split with ``n_eval`` held-out samples."""
        if not 0 < n_eval < len(self):
            raise DatasetError(f"cannot hold out {n_eval} of {len(self)} samples")
        perm = np.random.default_rng(seed).permutation(len(self))
        return self.subset(np.sort(perm[n_eval:])), self.subset(np.sort(perm[:n_eval]))


def load_cifar_binary(path: str | os.PathLike, limit: int | None = None) -> Dataset:
    """Parse one CIFAR-10 ``*.bin`` file, or every ``data_batch_*.bin`` in a directory.

    Each record is one label byte followed by 3072 pixel bytes (R, G, B planes
    of 32x32). Pixels are scaled to [0, 1] and normalised per channel with the
    usual CIFAR-10 training-set mean/std.
    """
    path = os.fspath(path)
    if os.path.isdir(path):
        files = sorted(os.path.join(path, f) for f in os.listdir(path)
                       if f.startswith("data_batch") and f.endswith(".bin"))
        if not files:
            raise DatasetError(f"no data_batch_*.bin files in {path}")
    else:
        files = [path]
    chunks = []
    for f in files:
        raw = np.fromfile(f, dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD:
            raise DatasetError(f"{f}: size {raw.size} is not a whole number of {CIFAR_RECORD}-byte records "
                               f"(truncated record?)")
        chunks.append(raw.reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks)
    if limit is not None:
        records = records[:limit]
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetError(f"label byte {labels.max()} out of range for CIFAR-10")
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    images = (pixels - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]
    return Dataset(images.astype(np.float32), labels, 10, {"source": path})


def write_cifar_binary(path, images_u8: np.ndarray, labels) -> None:
    """Write uint8 images [M, 3, 32, 32] in the CIFAR-10 binary layout."""
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    body = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), -1)
    np.concatenate([labels, body], axis=1).tofile(path)


def _normalize(images: np.ndarray) -> np.ndarray:
    mean = images.mean(axis=(0, 2, 3), keepdims=True)
    std = images.std(axis=(0, 2, 3), keepdims=True)
    return (images - mean) / np.where(std > 0, std, 1.0)


def synth_dataset(num_classes: int = 4, per_class: int = 200, seed: int = 0, size: int = 16,
                  noise: float = 0.8, channels: int = 3) -> Dataset:
    """Oriented gratings: class k is orientation k*pi/K.

    Every sample draws its own spatial frequency (a coarse or a fine scale),
    phase, colour mix and contrast, then gets Gaussian pixel noise of
    amplitude ``noise``. With ``noise=0`` the nuisance draws are disabled
    too, so all images of one class are identical.
    """
    if num_classes < 2:
        raise DatasetError("synthetic task needs at least 2 classes")
    rng = np.random.default_rng(seed)
    M = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    images = np.empty((M, channels, size, size))
    for n, k in enumerate(labels):
        theta = np.pi * k / num_classes
        if noise > 0:
            freq = rng.choice([1.5, 4.0]) * (1.0 + 0.15 * rng.standard_normal())
            phase = rng.uniform(0, 2 * np.pi)
            colour = rng.dirichlet(np.ones(channels)) * channels
            contrast = rng.uniform(0.5, 1.5)
            theta = theta + 0.15 * rng.standard_normal()
        else:
            freq, phase, colour, contrast = 2.5, 0.0, np.ones(channels), 1.0
        proj = (xx * np.cos(theta) + yy * np.sin(theta)) * (2 * np.pi * freq / size)
        pattern = contrast * np.sin(proj + phase)
        images[n] = colour[:, None, None] * pattern[None]
        if noise > 0:
            images[n] += noise * rng.standard_normal((channels, size, size))
    meta = {"source": "synthetic", "num_classes": num_classes, "per_class": per_class, "seed": seed,
            "size": size, "noise": noise}
    return Dataset(_normalize(images).astype(np.float32), labels, num_classes, meta)


def iterate_batches(ds: Dataset, batch_size: int, rng: np.random.Generator | None = None):
    order = rng.permutation(len(ds)) if rng is not None else np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]
