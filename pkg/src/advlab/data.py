"""Desk-scale image datasets: CIFAR-10 binary batches and a synthetic generator."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from advlab.rng import make_rng

CIFAR_RECORD = 3073
CIFAR_SIDE = 32


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # [3, H, W] in [0, 1]
    label: int


@dataclass
class Dataset:
    """Images stored as one contiguous [N, 3, H, W] float32 array."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError(f"dataset {self.name!r} is empty")
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"images must be [N, 3, H, W], got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError("images and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels out of range [0, {self.class_count})")

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]))

    @property
    def side(self) -> int:
        return self.images.shape[-1]

    def subset(self, index, name: str | None = None) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.class_count, name or self.name)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        """Split into the first ``n_first`` items and the rest (order kept)."""
        return (
            self.subset(np.arange(n_first), f"{self.name}[:{n_first}]"),
            self.subset(np.arange(n_first, len(self)), f"{self.name}[{n_first}:]"),
        )


def load_cifar10(paths: Sequence[str | os.PathLike]) -> Dataset:
    """Read CIFAR-10 binary batch files (label byte + 3072 channel-planar pixel bytes)."""
    chunks = []
    for path in paths:
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD:
            raise DataFormatError(
                f"{path}: size {raw.size} is not a positive multiple of {CIFAR_RECORD}"
            )
        chunks.append(raw.reshape(-1, CIFAR_RECORD))
    if not chunks:
        raise DataFormatError("no CIFAR-10 files given")
    records = np.concatenate(chunks)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(f"record {bad} has label byte {labels[bad]} > 9")
    pixels = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float32) / 255.0
    name = ",".join(os.path.basename(str(p)) for p in paths)
    return Dataset(pixels, labels, 10, name=f"cifar10:{name}")


def synth_dataset(
    K: int,
    n_per_class: int,
    side: int,
    seed: int,
    contrast: float = 0.1,
    noise_std: float = 0.05,
) -> Dataset:
    """Axis-aligned stripe patterns whose frequency rises with the class id.

    Class ``k`` has ``side // 2 - K // 2 + k // 2`` cycles per image (3..7 for
    ten classes at side 16, just below Nyquist) so the discriminative
    content straddles the low and high Haar bands. Even classes carry
    vertical stripes, odd classes horizontal ones. Each sample gets a
    random mean grey level and per-channel tint around a fixed-phase
    sinusoid of amplitude ``contrast``, plus i.i.d. Gaussian noise, then is
    clipped to [0, 1]. Items are ordered by class then sample index; shuffle
    through ``batch_iter``.
    """
    if K < 2:
        raise ValueError("need at least two classes")
    if side % 2:
        raise ValueError("side must be even")
    if side // 2 - K // 2 < 1:
        raise ValueError(f"side {side} is too small for {K} distinct stripe frequencies")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1 (an empty dataset is invalid)")
    rng = make_rng(seed)
    coord = (np.arange(side) + 0.5) / side
    images = np.empty((K * n_per_class, 3, side, side), dtype=np.float32)
    labels = np.repeat(np.arange(K), n_per_class)
    for k in range(K):
        wave = np.sin(2 * np.pi * (side // 2 - K // 2 + k // 2) * coord)
        pattern = np.broadcast_to(wave[None, :], (side, side)) if k % 2 == 0 else np.broadcast_to(wave[:, None], (side, side))
        sl = slice(k * n_per_class, (k + 1) * n_per_class)
        base = rng.uniform(0.35, 0.65, size=(n_per_class, 1, 1, 1))
        tint = rng.uniform(0.6, 1.0, size=(n_per_class, 3, 1, 1))
        noise = rng.normal(0.0, noise_std, size=(n_per_class, 3, side, side))
        images[sl] = np.clip(base + contrast * tint * pattern + noise, 0.0, 1.0)
    return Dataset(images, labels, K, name=f"synth:K={K},n={n_per_class},side={side},seed={seed}")


def batch_iter(ds: Dataset, batch_size: int, shuffle_seed: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` batches; seeded permutation when a seed is given."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    order = np.arange(n) if shuffle_seed is None else make_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield ds.images[idx], ds.labels[idx]


def batch_indices(n: int, batch_size: int, shuffle_seed: int | None = None) -> list[np.ndarray]:
    order = np.arange(n) if shuffle_seed is None else make_rng(shuffle_seed).permutation(n)
    return [order[s : s + batch_size] for s in range(0, n, batch_size)]
