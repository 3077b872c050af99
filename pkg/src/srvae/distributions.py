"""Diagonal Gaussians and the discretized logistic mixture over 8-bit pixels."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .numerics import DTYPE, RngStream

LOG_2PI = math.log(2.0 * math.pi)
LOG_VAR_BOUNDS = (-7.0, 7.0)
MIN_LOG_SCALE = -7.0
BIN_HALF_WIDTH = 1.0 / 255.0


def _sum_event(t: torch.Tensor) -> torch.Tensor:
    """Sum all but the leading (batch) dimension."""
    return t.reshape(t.shape[0], -1).sum(dim=1) if t.dim() > 1 else t


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape {tuple(a.shape)} does not match {tuple(b.shape)}")


@dataclass
class DiagGaussianParams:
    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        _check_same_shape(self.mean, self.log_var, "DiagGaussianParams")
        self.log_var = torch.clamp(self.log_var, *LOG_VAR_BOUNDS)

    @classmethod
    def standard(cls, shape) -> "DiagGaussianParams":
        return cls(torch.zeros(shape, dtype=DTYPE), torch.zeros(shape, dtype=DTYPE))


def gaussian_sample(params: DiagGaussianParams, noise: torch.Tensor) -> torch.Tensor:
    _check_same_shape(params.mean, noise, "gaussian_sample noise")
    return params.mean + torch.exp(0.5 * params.log_var) * noise


def gaussian_log_prob_elementwise(params: DiagGaussianParams, value: torch.Tensor) -> torch.Tensor:
    _check_same_shape(params.mean, value, "gaussian_log_prob")
    sq = (value - params.mean) ** 2 * torch.exp(-params.log_var)
    return -0.5 * (LOG_2PI + params.log_var + sq)


def gaussian_log_prob(params: DiagGaussianParams, value: torch.Tensor) -> torch.Tensor:
    """Log-density in nats, summed per example over everything but dim 0."""
    return _sum_event(gaussian_log_prob_elementwise(params, value))


def gaussian_kl_elementwise(q: DiagGaussianParams, p: DiagGaussianParams) -> torch.Tensor:
    _check_same_shape(q.mean, p.mean, "gaussian_kl")
    lq, lp = q.log_var, p.log_var
    return 0.5 * (torch.exp(lq - lp) + (q.mean - p.mean) ** 2 * torch.exp(-lp) - 1.0 + lp - lq)


def gaussian_kl(q: DiagGaussianParams, p: DiagGaussianParams) -> torch.Tensor:
    """KL(q || p) in nats, summed per example."""
    return _sum_event(gaussian_kl_elementwise(q, p))


def std_normal_log_prob(value: torch.Tensor) -> torch.Tensor:
    return _sum_event(-0.5 * (LOG_2PI + value ** 2))


# --------------------------------------------------------------------------
# Discretized logistic mixture
# --------------------------------------------------------------------------


@dataclass
class DLogisticMixtureParams:
    """Per-subpixel mixture; every array has shape ``pixel_shape + (n_mix,)``.

    Means live on the [-1, 1] pixel scale.
    """

    logit_weights: torch.Tensor
    means: torch.Tensor
    log_scales: torch.Tensor

    def __post_init__(self):
        _check_same_shape(self.logit_weights, self.means, "DLogisticMixtureParams means")
        _check_same_shape(self.logit_weights, self.log_scales, "DLogisticMixtureParams log_scales")
        if self.means.dim() < 1 or self.means.shape[-1] < 1:
            raise ValueError("mixture needs a trailing component axis with n_mix >= 1")
        self.log_scales = torch.clamp(self.log_scales, min=MIN_LOG_SCALE)

    @property
    def n_mix(self) -> int:
        return self.means.shape[-1]

    @property
    def pixel_shape(self) -> torch.Size:
        return self.means.shape[:-1]

    @classmethod
    def from_network(cls, out: torch.Tensor, channels: int, n_mix: int) -> "DLogisticMixtureParams":
        """Split a (B, channels*3*n_mix, H, W) conv output into (B, C, H, W, n_mix) arrays."""
        b, _, h, w = out.shape
        out = out.reshape(b, channels, 3, n_mix, h, w).permute(0, 1, 4, 5, 2, 3)
        return cls(out[..., 0, :], out[..., 1, :], out[..., 2, :])


def to_unit_scale(pixels: torch.Tensor) -> torch.Tensor:
    return pixels.to(DTYPE) / 127.5 - 1.0


def _log_bin_mass(centered: torch.Tensor, log_scales: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
    """log P(bin) for each mixture component.

    Interior bins use log(sigmoid(b) - sigmoid(a)) in the form
    ``b + log(-expm1(a - b)) - softplus(a) - softplus(b)``, which stays exact
    far into the tails where the plain CDF difference underflows.
    """
    inv_s = torch.exp(-log_scales)
    plus_in = inv_s * (centered + BIN_HALF_WIDTH)
    min_in = inv_s * (centered - BIN_HALF_WIDTH)

    log_cdf_plus = -F.softplus(-plus_in)
    log_one_minus_cdf_min = -F.softplus(min_in)
    log_delta = plus_in + torch.log(-torch.expm1(min_in - plus_in)) - F.softplus(min_in) - F.softplus(plus_in)

    p = pixels.unsqueeze(-1)
    return torch.where(p == 0, log_cdf_plus, torch.where(p == 255, log_one_minus_cdf_min, log_delta))


def dlogistic_log_prob_elementwise(params: DLogisticMixtureParams, pixels: torch.Tensor) -> torch.Tensor:
    if pixels.shape != params.pixel_shape:
        raise ValueError(f"pixels shape {tuple(pixels.shape)} does not match params {tuple(params.pixel_shape)}")
    if pixels.is_floating_point():
        if not torch.equal(pixels, torch.round(pixels)):
            raise ValueError("pixel values must be integers")
        pixels = pixels.long()
    if pixels.numel() and (int(pixels.min()) < 0 or int(pixels.max()) > 255):
        raise ValueError("pixel values must lie in [0, 255]")
    x = to_unit_scale(pixels).unsqueeze(-1)
    log_mass = _log_bin_mass(x - params.means, params.log_scales, pixels)
    log_w = torch.log_softmax(params.logit_weights, dim=-1)
    return torch.logsumexp(log_w + log_mass, dim=-1)


def dlogistic_log_prob(params: DLogisticMixtureParams, pixels: torch.Tensor, reduce: bool = True) -> torch.Tensor:
    """Log-probability of integer pixels in nats.

    With ``reduce`` the per-pixel values are summed over every dimension
    except the leading batch one.
    """
    lp = dlogistic_log_prob_elementwise(params, pixels)
    return _sum_event(lp) if reduce else lp


def dlogistic_sample(params: DLogisticMixtureParams, rng: RngStream) -> torch.Tensor:
    """Draw integer pixels in {0..255}.

    Consumes two uniforms per pixel from ``rng``: all component-selection
    uniforms first, then all logistic uniforms.
    """
    with torch.no_grad():
        shape = tuple(params.pixel_shape)
        weights = torch.softmax(params.logit_weights, dim=-1)
        cdf = torch.cumsum(weights, dim=-1)
        pick = torch.from_numpy(rng.uniform(shape)).unsqueeze(-1)
        comp = (cdf < pick).sum(dim=-1, keepdim=True).clamp(max=params.n_mix - 1)
        mu = torch.gather(params.means, -1, comp).squeeze(-1)
        log_s = torch.gather(params.log_scales, -1, comp).squeeze(-1)

        t = torch.from_numpy(np.clip(rng.uniform(shape), 1e-5, 1.0 - 1e-5))
        x = mu + torch.exp(log_s) * (torch.log(t) - torch.log1p(-t))
        x = x.clamp(-1.0, 1.0)
        return torch.round((x + 1.0) * 127.5).clamp(0, 255).long()


def dlogistic_pmf(params: DLogisticMixtureParams) -> torch.Tensor:
    """Full PMF over the 256 values for every pixel: shape ``pixel_shape + (256,)``."""
    support = torch.arange(256)
    shape = tuple(params.pixel_shape)
    expanded = DLogisticMixtureParams(
        params.logit_weights.unsqueeze(-2).expand(*shape, 256, params.n_mix),
        params.means.unsqueeze(-2).expand(*shape, 256, params.n_mix),
        params.log_scales.unsqueeze(-2).expand(*shape, 256, params.n_mix),
    )
    pixels = support.expand(*shape, 256)
    return torch.exp(dlogistic_log_prob_elementwise(expanded, pixels))
