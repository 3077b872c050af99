"""CIFAR-10 binary batches and a procedural toy-shape dataset."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

CIFAR_RECORD = 3073
CIFAR_SIDE = 32


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, H, W, C) uint8
    labels: Optional[np.ndarray] = None
    source: str = ""

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) == 0:
            raise ValueError("dataset needs a non-empty (N, H, W, C) image array")
        if self.images.dtype != np.uint8:
            raise ValueError("images must be uint8")

    def __len__(self):
        return len(self.images)

    @property
    def extents(self):
        return self.images.shape[1:]


def load_cifar10_binary(paths: Iterable[str | Path]) -> ImageDataset:
    images, labels = [], []
    names = []
    for path in paths:
        raw = Path(path).read_bytes()
        names.append(str(path))
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise ValueError(f"{path}: size {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.flatnonzero(records[:, 0] > 9)
        if bad.size:
            offset = int(bad[0]) * CIFAR_RECORD
            raise ValueError(f"{path}: label {records[bad[0], 0]} > 9 at byte offset {offset}")
        labels.append(records[:, 0].astype(np.int64))
        planes = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
        images.append(planes.transpose(0, 2, 3, 1))
    if not images:
        raise ValueError("no CIFAR-10 files given")
    return ImageDataset(np.ascontiguousarray(np.concatenate(images)), np.concatenate(labels), "cifar10:" + ",".join(names))


def cifar10_record_bytes(image: np.ndarray, label: int) -> bytes:
    """Inverse of the loader for one record."""
    return bytes([label]) + np.ascontiguousarray(image.transpose(2, 0, 1)).tobytes()


def gen_toy_shapes(n: int, extent: int = 16, seed: int = 0) -> ImageDataset:
    """Flat background plus 1-3 hard-edged rectangles or discs per image."""
    if extent % 2 or extent < 8:
        raise ValueError("toy extent must be even and >= 8")
    rng = np.random.default_rng(seed)
    images = np.empty((n, extent, extent, 3), dtype=np.uint8)
    rows, cols = np.mgrid[0:extent, 0:extent]
    for i in range(n):
        img = np.empty((extent, extent, 3), dtype=np.uint8)
        img[:] = rng.integers(0, 256, size=3)
        for _ in range(rng.integers(1, 4)):
            color = rng.integers(0, 256, size=3)
            if rng.random() < 0.5:
                h, w = rng.integers(extent // 4, extent // 2 + 1, size=2)
                r0 = rng.integers(0, extent - h + 1)
                c0 = rng.integers(0, extent - w + 1)
                img[r0:r0 + h, c0:c0 + w] = color
            else:
                radius = rng.uniform(extent / 8, extent / 4)
                cr, cc = rng.uniform(radius, extent - radius, size=2)
                img[(rows - cr) ** 2 + (cols - cc) ** 2 <= radius ** 2] = color
        images[i] = img
    return ImageDataset(images, None, f"toy_shapes(n={n},extent={extent},seed={seed})")
