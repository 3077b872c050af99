"""Stable log-domain reductions, counter-based random streams, gradient checking.

Tensors are float64 throughout; 32-bit only appears in checkpoint files.
"""
from __future__ import annotations

import hashlib
import math
from typing import Callable

import numpy as np
import torch
from scipy.special import ndtri

DTYPE = torch.float64


class NonFiniteError(ArithmeticError):
    """A quantity that must be finite came out as inf or nan."""


def log_sum_exp(values) -> float:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty vector")
    m = v.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(v - m))))


def log_mean_exp(values) -> float:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("log_mean_exp of an empty vector")
    return log_sum_exp(v) - math.log(v.size)


def torch_log_mean_exp(values: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.logsumexp(values, dim=dim) - math.log(values.shape[dim])


# --------------------------------------------------------------------------
# Random streams
# --------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _label_hash(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest(), "little")


class RngStream:
    """Counter-based SplitMix64 stream.

    Draw ``i`` is ``mix64(seed + (i + 1) * golden)``, so the stream is a pure
    function of ``(seed, position)``. Uniforms take the top 53 bits and are
    offset by half an ulp, landing strictly inside (0, 1). Each normal is the
    inverse normal CDF of exactly one uniform, so every draw advances the
    position by one regardless of distribution.

    A stream is single-owner; hand out ``child(label)`` streams for parallel
    or independent work.
    """

    def __init__(self, seed: int, position: int = 0):
        self.seed = int(seed) & _MASK64
        self.position = int(position)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, position={self.position})"

    def _bits(self, n: int) -> np.ndarray:
        idx = np.arange(self.position + 1, self.position + n + 1, dtype=np.uint64)
        self.position += n
        return _mix64(np.uint64(self.seed) + idx * _GOLDEN)

    def uniform(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        bits = self._bits(n)
        u = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
        return u.reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        return ndtri(self.uniform(shape))

    def normal_tensor(self, *shape: int) -> torch.Tensor:
        return torch.from_numpy(self.normal(shape))

    def child(self, label: str) -> "RngStream":
        key = np.array([self.seed ^ _label_hash(label)], dtype=np.uint64)
        return RngStream(int(_mix64(key + _GOLDEN)[0]))

    def at(self, position: int) -> "RngStream":
        return RngStream(self.seed, position)


def rng_stream(seed: int) -> RngStream:
    return RngStream(seed)


# --------------------------------------------------------------------------
# Finite-difference gradient checking
# --------------------------------------------------------------------------


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], params: torch.Tensor, eps: float = 1e-4) -> float:
    """Largest relative error between autograd and central differences.

    ``f`` maps a float64 tensor to either a scalar or a vector of terms whose
    sum is the function being checked. For a vector, the central difference
    is taken term by term before summing, which keeps cancellation error at
    the scale of the individual terms rather than of their total.

    Relative error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    p = params.detach().clone().to(DTYPE).requires_grad_(True)
    out = f(p).sum()
    (analytic,) = torch.autograd.grad(out, p, allow_unused=False)
    analytic = analytic.detach().reshape(-1)

    base = p.detach().clone().reshape(-1)
    worst = 0.0
    with torch.no_grad():
        for i in range(base.numel()):
            orig = base[i].item()
            base[i] = orig + eps
            f_plus = f(base.view_as(p))
            base[i] = orig - eps
            f_minus = f(base.view_as(p))
            base[i] = orig
            if not (torch.isfinite(f_plus).all() and torch.isfinite(f_minus).all()):
                raise NonFiniteError(f"f is not finite when probing coordinate {i}")
            numeric = float((f_plus - f_minus).sum()) / (2.0 * eps)
            a = analytic[i].item()
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, rel)
    return worst
