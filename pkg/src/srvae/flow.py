"""Affine-coupling flow prior over flat latent vectors with a standard-normal base."""
from __future__ import annotations

import torch
from torch import nn

from .distributions import LOG_2PI, std_normal_log_prob
from .layers import he_init_, mlp
from .numerics import DTYPE, NonFiniteError, RngStream

LOG_SCALE_BOUND = 2.0


def parity_mask(dim: int, parity: int) -> torch.Tensor:
    """1 marks pass-through coordinates. A 1-D latent has nothing to condition on,
    so every layer transforms its single coordinate (affine map)."""
    if dim == 1:
        return torch.zeros(1, dtype=DTYPE)
    return (torch.arange(dim) % 2 == parity).to(DTYPE)


class CouplingLayer(nn.Module):
    def __init__(self, mask: torch.Tensor, hidden: int):
        super().__init__()
        mask = mask.to(DTYPE)
        dim = mask.numel()
        if dim > 1 and (mask.sum() == 0 or mask.sum() == dim):
            raise ValueError("coupling mask needs both pass-through and transformed coordinates")
        self.register_buffer("mask", mask)
        self.scale_net = mlp(dim, hidden, dim)
        self.translate_net = mlp(dim, hidden, dim)
        self.to(DTYPE)

    def _scale_shift(self, v: torch.Tensor):
        free = 1.0 - self.mask
        h = v * self.mask
        s = LOG_SCALE_BOUND * torch.tanh(self.scale_net(h)) * free
        t = self.translate_net(h) * free
        return s, t

    def forward(self, v: torch.Tensor):
        """v -> (v_out, log|det J|) per row."""
        self._check(v)
        s, t = self._scale_shift(v)
        out = v * self.mask + (1.0 - self.mask) * (v * torch.exp(s) + t)
        return out, s.sum(dim=-1)

    def inverse(self, v_out: torch.Tensor):
        v, s = self.inverse_with_scales(v_out)
        return v, -s.sum(dim=-1)

    def inverse_with_scales(self, v_out: torch.Tensor):
        """Inverse plus the per-coordinate forward log-scales (zero on masked coords)."""
        self._check(v_out)
        s, t = self._scale_shift(v_out)
        v = v_out * self.mask + (1.0 - self.mask) * (v_out - t) * torch.exp(-s)
        return v, s

    def _check(self, v):
        if v.shape[-1] != self.mask.numel():
            raise ValueError(f"expected last dim {self.mask.numel()}, got {v.shape[-1]}")

    def zero_final_(self):
        with torch.no_grad():
            for net in (self.scale_net, self.translate_net):
                net[-1].weight.zero_()
                net[-1].bias.zero_()


class FlowPrior(nn.Module):
    """p(u) = N(f^{-1}(u); 0, I) |det d f^{-1}/du|, with f = layers applied in order."""

    def __init__(self, dim: int, depth: int = 8, hidden: int | None = None):
        super().__init__()
        self.dim = dim
        hidden = hidden or 4 * dim
        self.layers = nn.ModuleList(CouplingLayer(parity_mask(dim, i % 2), hidden) for i in range(depth))
        self.to(DTYPE)

    def forward(self, v: torch.Tensor):
        log_det = torch.zeros(v.shape[:-1], dtype=v.dtype)
        for i, layer in enumerate(self.layers):
            v, ld = layer(v)
            _require_finite(v, i)
            log_det = log_det + ld
        return v, log_det

    def inverse(self, u: torch.Tensor):
        log_det = torch.zeros(u.shape[:-1], dtype=u.dtype)
        for i in reversed(range(len(self.layers))):
            u, ld = self.layers[i].inverse(u)
            _require_finite(u, i)
            log_det = log_det + ld
        return u, log_det

    def init_(self, rng: RngStream, zero_final: bool = True):
        he_init_(self, rng)
        if zero_final:
            for layer in self.layers:
                layer.zero_final_()
        return self


def _require_finite(t: torch.Tensor, index: int):
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite value in flow layer {index}")


def flow_log_prob(flow: FlowPrior, u: torch.Tensor) -> torch.Tensor:
    """log p(u) per row of a (B, dim) batch."""
    if u.shape[-1] != flow.dim:
        raise ValueError(f"expected latent dim {flow.dim}, got {u.shape[-1]}")
    v, log_det_inv = flow.inverse(u)
    return std_normal_log_prob(v) + log_det_inv


def flow_log_prob_elementwise(flow: FlowPrior, u: torch.Tensor) -> torch.Tensor:
    """(B, dim) split of :func:`flow_log_prob`: coordinate d carries the base
    log-density of v_d minus every forward log-scale applied to coordinate d."""
    if u.shape[-1] != flow.dim:
        raise ValueError(f"expected latent dim {flow.dim}, got {u.shape[-1]}")
    acc = torch.zeros_like(u)
    for i in reversed(range(len(flow.layers))):
        u, s = flow.layers[i].inverse_with_scales(u)
        _require_finite(u, i)
        acc = acc - s
    return acc - 0.5 * (LOG_2PI + u ** 2)


def flow_sample(flow: FlowPrior, rng: RngStream, n: int = 1) -> torch.Tensor:
    with torch.no_grad():
        v = rng.normal_tensor(n, flow.dim)
        u, _ = flow(v)
    return u
