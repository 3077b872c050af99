"""The deterministic compression q(y|x): 2x box downscaling with banker's rounding.

Images are uint8 arrays laid out ``(..., H, W, C)``; leading batch axes pass through.
"""
from __future__ import annotations

import math

import numpy as np

# q(y|x) is a point mass: log-mass off its support is -inf. Callers compare
# against this value and never do arithmetic with it.
OFF_SUPPORT = -math.inf


def downscale(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim < 3:
        raise ValueError("expected an image shaped (..., H, W, C)")
    h, w, c = x.shape[-3:]
    if h % 2 or w % 2:
        raise ValueError(f"downscale needs even extents, got {h}x{w}")
    blocks = x.astype(np.int64).reshape(*x.shape[:-3], h // 2, 2, w // 2, 2, c)
    mean = blocks.sum(axis=(-4, -2)) / 4.0
    return np.round(mean).astype(np.uint8)


def degenerate_log_mass(y: np.ndarray, x: np.ndarray) -> float:
    """log q(y|x): 0 when y == downscale(x), OFF_SUPPORT otherwise."""
    y, x = np.asarray(y), np.asarray(x)
    h, w, c = x.shape[-3:]
    expected = (*x.shape[:-3], h // 2, w // 2, c)
    if y.shape != expected:
        raise ValueError(f"y shape {y.shape} is not half of x shape {x.shape}")
    return 0.0 if np.array_equal(y, downscale(x)) else OFF_SUPPORT


def upsample_nearest(y: np.ndarray, factor: int = 2) -> np.ndarray:
    """Pixel replication, used for display grids."""
    return np.repeat(np.repeat(np.asarray(y), factor, axis=-3), factor, axis=-2)
