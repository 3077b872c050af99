"""Density and sample-quality metrics, plus PPM image grids."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .models import prepare_batch
from .numerics import NonFiniteError, RngStream

PIXEL_FRECHET_LABEL = "pixel-Fréchet (not FID)"
GUTTER = 2


def bits_per_dim(nats, h: int, w: int, c: int):
    return nats / (h * w * c * math.log(2.0))


def iw_log_weights(model, x, k: int, rng: RngStream, chunk: int = 50) -> torch.Tensor:
    """(k, B) importance log-weights log p(x, w_i) - log q(w_i | x).

    Draw i consumes ``model.draw_noise(rng, B)`` in index order, so draw 0 is
    exactly the draw an ELBO evaluation on the same stream would use.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    x_t, y_t = prepare_batch(model, x)
    b = x_t.shape[0]
    out = []
    with torch.no_grad():
        for start in range(0, k, chunk):
            n = min(chunk, k - start)
            draws = [model.draw_noise(rng, b) for _ in range(n)]
            noise = {key: torch.cat([d[key] for d in draws]) for key in draws[0]}
            xs = x_t.repeat(n, 1, 1, 1)
            ys = None if y_t is None else y_t.repeat(n, 1, 1, 1)
            out.append(model.log_weight(xs, ys, noise).reshape(n, b))
    log_w = torch.cat(out)
    if not torch.isfinite(log_w).all():
        raise NonFiniteError("non-finite importance weight")
    return log_w


def iw_nll(model, x, k: int, rng: RngStream, chunk: int = 50) -> np.ndarray:
    """Importance-weighted NLL estimate in nats, one value per image."""
    log_w = iw_log_weights(model, x, k, rng, chunk)
    return -(torch.logsumexp(log_w, dim=0) - math.log(k)).numpy()


# --------------------------------------------------------------------------
# Pixel-statistics Fréchet distance
# --------------------------------------------------------------------------


@dataclass
class PixelStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("pixel statistics need at least 2 samples")
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance does not match mean dimensionality")


def pixel_stats(images: np.ndarray, pool: int = 1) -> PixelStats:
    """Mean/covariance of flattened images on the [0, 1] scale, optionally pool x pool averaged."""
    arr = np.asarray(images, dtype=np.float64) / 255.0
    n, h, w, c = arr.shape
    if n < 2:
        raise ValueError("pixel statistics need at least 2 samples")
    if pool > 1:
        arr = arr.reshape(n, h // pool, pool, w // pool, pool, c).mean(axis=(2, 4))
    flat = arr.reshape(n, -1)
    return PixelStats(flat.mean(axis=0), np.atleast_2d(np.cov(flat, rowvar=False)), n)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def pixel_frechet(a: PixelStats, b: PixelStats) -> float:
    """|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The trace of (S_a S_b)^{1/2} is taken as that of the symmetric
    (S_a^{1/2} S_b S_a^{1/2})^{1/2}, which has the same eigenvalues.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.size} vs {b.mean.size}")
    root_a = _psd_sqrt(a.cov)
    cross = _psd_sqrt(root_a @ b.cov @ root_a)
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))


# --------------------------------------------------------------------------
# PPM grids
# --------------------------------------------------------------------------


def ppm_grid_bytes(images, cols: int) -> bytes:
    imgs = [np.asarray(im) for im in images]
    if not imgs:
        raise ValueError("no images to tile")
    shape = imgs[0].shape
    if any(im.shape != shape for im in imgs):
        raise ValueError("all images in a grid must share extents")
    h, w, c = shape
    if c not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {c}")
    cols = max(1, min(cols, len(imgs)))
    rows = -(-len(imgs) // cols)
    width = cols * w + (cols - 1) * GUTTER
    height = rows * h + (rows - 1) * GUTTER
    canvas = np.zeros((height, width, 3), dtype=np.uint8)
    for i, im in enumerate(imgs):
        r, q = divmod(i, cols)
        top, left = r * (h + GUTTER), q * (w + GUTTER)
        canvas[top:top + h, left:left + w] = np.repeat(im, 3, axis=2) if c == 1 else im
    return f"P6\n{width} {height}\n255\n".encode("ascii") + canvas.tobytes()


def write_ppm_grid(images, cols: int, path) -> None:
    Path(path).write_bytes(ppm_grid_bytes(images, cols))


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 (or P5) file with maxval 255 into (H, W, C) uint8."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P6", b"P5") or maxval != 255:
        raise ValueError(f"{path}: only binary P5/P6 with maxval 255 is supported")
    c = 3 if magic == b"P6" else 1
    body = data[pos + 1:]
    if len(body) < w * h * c:
        raise ValueError(f"{path}: pixel data truncated")
    return np.frombuffer(body[: w * h * c], dtype=np.uint8).reshape(h, w, c).copy()
