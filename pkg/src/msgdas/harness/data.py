"""Datasets: a separable synthetic stand-in and the CIFAR-10 binary batches."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, IngestionError, InputError

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_RECORDS_PER_FILE = 10000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))


@dataclass
class Dataset:
    images: np.ndarray      # [N, C, H, W] float32
    labels: np.ndarray      # [N] int64
    name: str
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise InputError("images and labels disagree in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray, name: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], name or self.name, self.num_classes)


def linear_probe_accuracy(images: np.ndarray, labels: np.ndarray, num_classes: int,
                          seed: int = 0, ridge: float = 10.0) -> float:
    """Held-out accuracy of a one-vs-rest ridge classifier on raw pixels (half/half split)."""
    n = len(labels)
    order = np.random.default_rng(seed).permutation(n)
    tr, te = order[: n // 2], order[n // 2:]
    x = images.reshape(n, -1).astype(np.float64)
    x = np.hstack([x, np.ones((n, 1))])
    y = np.eye(num_classes)[labels] * 2 - 1
    a = x[tr]
    w = np.linalg.solve(a.T @ a + ridge * np.eye(a.shape[1]), a.T @ y[tr])
    return float((np.argmax(x[te] @ w, axis=1) == labels[te]).mean())


def gen_synthetic(n: int = 512, classes: int = 2, hw: int = 16, seed: int = 0, channels: int = 3,
                  noise: float = 2.0, probe: bool = True) -> Dataset:
    """Balanced class-conditional images: a fixed low-frequency grating per class plus Gaussian texture."""
    if n < classes:
        raise ConfigurationError(f"need at least one image per class (n={n}, classes={classes})")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(hw), np.arange(hw), indexing="ij")
    patterns = np.empty((classes, channels, hw, hw))
    for c in range(classes):
        angle = np.pi * c / classes + rng.uniform(0, np.pi / (4 * classes))
        freq = rng.uniform(1.0, 2.5)
        fy, fx = freq * np.sin(angle), freq * np.cos(angle)
        for ch in range(channels):
            phase = rng.uniform(0, 2 * np.pi)
            patterns[c, ch] = np.cos(2 * np.pi * (fy * yy + fx * xx) / hw + phase)
    labels = rng.permutation(np.arange(n) % classes)
    amp = rng.uniform(0.8, 1.2, size=(n, 1, 1, 1))
    images = amp * patterns[labels] + noise * rng.standard_normal((n, channels, hw, hw))
    images = images.astype(np.float32)
    meta = {"seed": seed}
    if probe:
        meta["probe_accuracy"] = linear_probe_accuracy(images, labels, classes, seed)
    return Dataset(images, labels.astype(np.int64), "synthetic", classes, meta)


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise IngestionError(f"{path}: file is missing")
    raw = np.fromfile(path, dtype=np.uint8)
    expected = CIFAR_RECORD * CIFAR_RECORDS_PER_FILE
    if raw.size != expected:
        offset = (raw.size // CIFAR_RECORD) * CIFAR_RECORD
        raise IngestionError(
            f"{path.name}: truncated or oversized ({raw.size} bytes, expected {expected}); "
            f"last complete record ends at byte offset {offset}"
        )
    rec = raw.reshape(CIFAR_RECORDS_PER_FILE, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise IngestionError(f"{path.name}: invalid label byte at offset {bad * CIFAR_RECORD}")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10_binary(path, subset_per_class: int = 0, downsample_to: int = 0) -> Dataset:
    """Load the five CIFAR-10 training batches, optionally stratified and downsampled.

    Pixels are scaled to [0, 1] then normalized per channel with the
    statistics of the returned subset.
    """
    root = Path(path)
    parts = [_read_cifar_file(root / name) for name in CIFAR_TRAIN_FILES]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([lab for _, lab in parts])
    if subset_per_class:
        keep = np.concatenate([np.flatnonzero(labels == c)[:subset_per_class] for c in range(10)])
        keep.sort()
        pixels, labels = pixels[keep], labels[keep]
    images = pixels.astype(np.float32) / 255.0
    if downsample_to and downsample_to != 32:
        if 32 % downsample_to:
            raise ConfigurationError(f"downsample_to must divide 32, got {downsample_to}")
        f = 32 // downsample_to
        images = images.reshape(len(images), 3, downsample_to, f, downsample_to, f).mean(axis=(3, 5))
    mean = images.mean(axis=(0, 2, 3), keepdims=True)
    std = images.std(axis=(0, 2, 3), keepdims=True) + 1e-8
    images = ((images - mean) / std).astype(np.float32)
    return Dataset(images, labels, "cifar10", 10)


def split_half(ds: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Random disjoint, exhaustive, equal-size train/validation partition."""
    n = len(ds)
    if n % 2:
        raise InputError(f"cannot split {n} samples into two equal halves")
    order = np.random.default_rng(seed).permutation(n)
    return ds.subset(np.sort(order[: n // 2]), ds.name + "/train"), ds.subset(np.sort(order[n // 2:]), ds.name + "/val")


def batches(ds: Dataset, batch_size: int, rng: np.random.Generator):
    """Shuffled mini-batches; an incomplete tail batch is dropped unless it is the only one."""
    order = rng.permutation(len(ds))
    count = max(1, len(ds) // batch_size)
    for b in range(count):
        idx = order[b * batch_size:(b + 1) * batch_size]
        yield ds.images[idx], ds.labels[idx]


def steps_per_epoch(ds: Dataset, batch_size: int) -> int:
    return max(1, len(ds) // batch_size)


def load_dataset(data_cfg, seed: int) -> Dataset:
    if data_cfg.dataset == "synthetic":
        return gen_synthetic(data_cfg.synthetic_n, data_cfg.synthetic_classes, data_cfg.synthetic_hw, seed)
    if data_cfg.dataset == "cifar10":
        if not data_cfg.path:
            raise ConfigurationError("cifar10 needs data.path pointing at the binary batches")
        return load_cifar10_binary(data_cfg.path, data_cfg.subset_per_class, data_cfg.downsample_to)
    raise ConfigurationError(f"unknown dataset {data_cfg.dataset!r}")
