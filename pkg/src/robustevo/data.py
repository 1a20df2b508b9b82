"""Datasets: CIFAR-10 binary ingestion, a synthetic desk-scale dataset, splits, augmentation."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_SPLIT = (43000, 3500, 3500)


@dataclass
class Dataset:
    images: np.ndarray  # N x H x W x C, float32 in [0, 1]
    labels: np.ndarray  # N, int64
    n_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x H x W x C, got shape {self.images.shape}")
        if len(self.images) == 0 or len(self.images) != len(self.labels):
            raise ValueError("need a non-empty dataset with one label per image")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError("labels out of range")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.n_classes)


def _read_cifar_file(path: Path):
    raw = path.read_bytes()
    if len(raw) != 10000 * CIFAR_RECORD:
        raise ValueError(f"{path.name}: expected {10000 * CIFAR_RECORD} bytes, found {len(raw)}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise ValueError(f"{path.name}: label byte {labels.max()} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return images, labels


def _cifar_dir(directory) -> Path:
    d = Path(directory)
    nested = d / "cifar-10-batches-bin"
    return nested if not (d / CIFAR_TEST_FILE).exists() and nested.is_dir() else d


def load_cifar10_binary(directory, split: str = "train") -> Dataset:
    """CIFAR-10 binary version; ``split`` is ``"train"`` (50,000) or ``"test"`` (10,000)."""
    d = _cifar_dir(directory)
    names = CIFAR_TRAIN_FILES if split == "train" else (CIFAR_TEST_FILE,)
    parts = [_read_cifar_file(d / n) for n in names]
    images = np.concatenate([p[0] for p in parts]).astype(np.float32) / 255.0
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, 10)


def _pattern(k: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Class-k template with random phase: a size x size map in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    period = max(size // 2, 2)
    phase = rng.integers(period)
    c = (size - 1) / 2 + rng.uniform(-1, 1, size=2)
    r = np.hypot(yy - c[0], xx - c[1])
    if k == 0:
        return ((yy + phase) % period < period / 2).astype(np.float32)
    if k == 1:
        return ((xx + phase) % period < period / 2).astype(np.float32)
    if k == 2:
        return ((xx + yy + phase) % period < period / 2).astype(np.float32)
    if k == 3:
        return ((xx - yy + phase) % period < period / 2).astype(np.float32)
    if k == 4:
        return (r < size / 4).astype(np.float32)
    if k == 5:
        return (np.abs(r - size / 3) < 1.0).astype(np.float32)
    if k == 6:
        return ((((xx + phase) // 2) + ((yy + phase) // 2)) % 2).astype(np.float32)
    if k == 7:
        return ((np.abs(yy - c[0]) < 1.0) | (np.abs(xx - c[1]) < 1.0)).astype(np.float32)
    if k == 8:
        return xx / (size - 1)
    return yy / (size - 1)


def synth_dataset(n_per_class: int, n_classes: int = 3, size: int = 8, seed: int = 0,
                  noise: float = 0.05, contrast: float = 0.15) -> Dataset:
    """Deterministic procedural images: class-specific geometric patterns,
    random phase, random color tint and Gaussian pixel noise."""
    if not 2 <= n_classes <= 10:
        raise ValueError("n_classes must be in [2, 10]")
    rng = np.random.default_rng(seed)
    n = n_per_class * n_classes
    images = np.empty((n, size, size, 3), dtype=np.float32)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    for i, k in enumerate(labels):
        base = _pattern(int(k), size, rng)
        tint = rng.uniform(0.5, 1.0, size=3).astype(np.float32)
        offset = rng.uniform(0.0, 0.2)
        img = offset + contrast * base[..., None] * tint + rng.normal(0, noise, size=(size, size, 3))
        images[i] = np.clip(img, 0.0, 1.0)
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], n_classes)


@dataclass(frozen=True)
class SplitSpec:
    sizes: tuple = CIFAR_SPLIT
    seed: int = 0

    def __post_init__(self):
        if len(self.sizes) != 3 or any(s < 0 for s in self.sizes):
            raise ValueError("sizes must be three non-negative integers")


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Random disjoint (evolutionary-train, control, fitness) subsets."""
    a, b, c = spec.sizes
    if a + b + c > len(ds):
        raise ValueError(f"split sizes {spec.sizes} exceed dataset size {len(ds)}")
    perm = np.random.default_rng(spec.seed).permutation(len(ds))
    return ds.subset(perm[:a]), ds.subset(perm[a:a + b]), ds.subset(perm[a + b:a + b + c])


def split_indices(n: int, spec: SplitSpec):
    a, b, c = spec.sizes
    perm = np.random.default_rng(spec.seed).permutation(n)
    return perm[:a], perm[a:a + b], perm[a + b:a + b + c]


def augment(batch: np.ndarray, rng: np.random.Generator, pad: int = 4,
            crops: np.ndarray | None = None, flips: np.ndarray | None = None) -> np.ndarray:
    """Zero-pad, random H x W crop, random horizontal flip (p = 0.5).

    ``crops`` (N x 2 offsets into the padded image) and ``flips`` (N bools)
    override the random draws.
    """
    n, h, w, _ = batch.shape
    if h != w:
        raise ValueError("augmentation expects square images")
    if crops is None:
        crops = rng.integers(0, 2 * pad + 1, size=(n, 2))
    if flips is None:
        flips = rng.random(n) < 0.5
    padded = np.pad(batch, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    rows = crops[:, 0, None] + np.arange(h)
    cols = crops[:, 1, None] + np.arange(w)
    cols = np.where(np.asarray(flips)[:, None], cols[:, ::-1], cols)
    return padded[np.arange(n)[:, None, None], rows[:, :, None], cols[:, None, :]]
