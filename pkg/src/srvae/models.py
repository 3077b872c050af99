"""Flow-prior VAE and the two-level super-resolution VAE.

Generative model of the srVAE::

    p(x, y, z, u) = p(x | y, z) p(z | y, u) p(y | u) p(u)

with posterior q(z | x) q(u | y) q(y | x), where q(y | x) is the point mass at
``downscale(x)``. Because that point mass has zero entropy there is no
log q(y|x) term in the loss, and z is inferred from x alone.

Images enter as uint8 arrays shaped (B, H, W, C) (or a single (H, W, C));
internally they are long tensors shaped (B, C, H, W). Latents are flat
(B, dim) vectors; networks view them as a (c, H/4, W/4) grid.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .distributions import (
    DiagGaussianParams,
    DLogisticMixtureParams,
    dlogistic_log_prob,
    dlogistic_sample,
    gaussian_kl_elementwise,
    gaussian_log_prob,
    gaussian_log_prob_elementwise,
    gaussian_sample,
    to_unit_scale,
)
from .downscale import OFF_SUPPORT, degenerate_log_mass, downscale
from .flow import FlowPrior, flow_log_prob, flow_log_prob_elementwise, flow_sample
from .layers import SmoothELU, conv3x3, he_init_
from .numerics import DTYPE, NonFiniteError, RngStream, rng_stream


class OffSupportError(ValueError):
    """y is not the deterministic compression of x, so log q(y|x) = -inf."""


@dataclass
class ModelConfig:
    kind: str = "srvae"
    height: int = 16
    width: int = 16
    channels: int = 3
    latent_k: int = 32
    latent_m: int = 32
    n_mix: int = 5
    flow_depth: int = 8
    flow_hidden: int = 0  # 0 means 4 * latent dim
    hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("vae", "srvae"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.height % 2 or self.width % 2:
            raise ValueError(f"image extents must be even, got {self.height}x{self.width}")
        if self.height % 4 or self.width % 4:
            raise ValueError("image extents must be multiples of 4 (latent grid is H/4 x W/4)")
        cells = self.grid[0] * self.grid[1]
        dims = [("latent_m", self.latent_m)]
        if self.kind == "srvae":
            dims.append(("latent_k", self.latent_k))
        for name, d in dims:
            if d < 1 or d % cells:
                raise ValueError(f"{name}={d} must be a positive multiple of the latent grid size {cells}")
        if self.n_mix < 1:
            raise ValueError("n_mix must be >= 1")

    @property
    def grid(self):
        return self.height // 4, self.width // 4

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in names:
                raise KeyError(f"unknown model config key {k!r}")
            out[k] = v if k == "kind" else int(v)
        return cls(**out)


PRESETS = {
    "tiny": dict(height=8, width=8, channels=1, latent_k=8, latent_m=8, n_mix=1, flow_depth=2, hidden=8),
    "toy": dict(height=16, width=16, channels=3, latent_k=32, latent_m=32, n_mix=5, flow_depth=8, hidden=32),
    # latent 16x8x8 as in the CIFAR-10 experiments; networks remain desk-scale
    "cifar10": dict(height=32, width=32, channels=3, latent_k=1024, latent_m=1024, n_mix=5, flow_depth=8, hidden=64),
}


def preset(name: str, kind: str = "srvae", **overrides) -> ModelConfig:
    return ModelConfig(kind=kind, **{**PRESETS[name], **overrides})


@dataclass
class ElboTerms:
    """Per-example losses in nats: reconstruction NLLs and KL divergences."""

    re_x: torch.Tensor
    re_y: torch.Tensor
    kl_z: torch.Tensor
    kl_u: torch.Tensor

    @classmethod
    def from_pieces(cls, pieces: dict) -> "ElboTerms":
        return cls(**{k: v.flatten(1).sum(dim=1) for k, v in pieces.items()})

    def elbo_loss(self) -> torch.Tensor:
        return self.re_x + self.re_y + self.kl_z + self.kl_u

    def check_finite(self):
        for f in fields(self):
            if not torch.isfinite(getattr(self, f.name)).all():
                raise NonFiniteError(f"ELBO term {f.name} is not finite")
        return self

    def means(self) -> dict:
        out = {f.name: float(getattr(self, f.name).detach().mean()) for f in fields(self)}
        out["elbo_loss"] = float(self.elbo_loss().detach().mean())
        return out


# --------------------------------------------------------------------------
# Networks
# --------------------------------------------------------------------------


class GaussianEncoder(nn.Module):
    """Three 3x3 convs ending in 2*c_lat planes -> flat mean / log-variance."""

    def __init__(self, c_in: int, hidden: int, c_lat: int, strides):
        super().__init__()
        s0, s1, s2 = strides
        self.net = nn.Sequential(
            conv3x3(c_in, hidden, s0), SmoothELU(),
            conv3x3(hidden, hidden, s1), SmoothELU(),
            conv3x3(hidden, 2 * c_lat, s2),
        )

    def forward(self, inp: torch.Tensor) -> DiagGaussianParams:
        out = self.net(inp)
        mean, log_var = out.chunk(2, dim=1)
        return DiagGaussianParams(mean.flatten(1), log_var.flatten(1))


class MixtureDecoder(nn.Module):
    def __init__(self, c_in: int, hidden: int, channels: int, n_mix: int):
        super().__init__()
        self.channels, self.n_mix = channels, n_mix
        self.net = nn.Sequential(
            conv3x3(c_in, hidden), SmoothELU(),
            conv3x3(hidden, hidden), SmoothELU(),
            conv3x3(hidden, channels * 3 * n_mix),
        )

    def forward(self, inp: torch.Tensor) -> DLogisticMixtureParams:
        return DLogisticMixtureParams.from_network(self.net(inp), self.channels, self.n_mix)


def _up_nearest(t, factor=2):
    return F.interpolate(t, scale_factor=factor, mode="nearest")


def _up_bilinear(t, size):
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)


class _Base(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config

    def _as_grid(self, v: torch.Tensor) -> torch.Tensor:
        gh, gw = self.config.grid
        return v.reshape(v.shape[0], -1, gh, gw)

    def _init(self):
        self.to(DTYPE)
        he_init_(self, rng_stream(self.config.seed).child("init"))
        for layer in self.prior.layers:
            layer.zero_final_()


class VaeModel(_Base):
    def __init__(self, config: ModelConfig):
        super().__init__(config)
        c = config.channels
        c_lat = config.latent_m // (config.grid[0] * config.grid[1])
        self.encoder = GaussianEncoder(c, config.hidden, c_lat, (1, 2, 2))
        self.decoder = MixtureDecoder(c_lat, config.hidden, c, config.n_mix)
        self.prior = FlowPrior(config.latent_m, config.flow_depth, config.flow_hidden or None)
        self._init()

    def q_z(self, x_t):
        return self.encoder(to_unit_scale(x_t))

    def p_x(self, z):
        cfg = self.config
        return self.decoder(_up_bilinear(self._as_grid(z), (cfg.height, cfg.width)))

    def draw_noise(self, rng: RngStream, batch: int) -> dict:
        return {"z": rng.normal_tensor(batch, self.config.latent_m)}

    def loss_pieces(self, x_t, y_t, noise, kl_mode="sample") -> dict:
        q = self.q_z(x_t)
        z = gaussian_sample(q, noise["z"])
        re_x = -dlogistic_log_prob(self.p_x(z), x_t, reduce=False)
        kl = gaussian_log_prob_elementwise(q, z) - flow_log_prob_elementwise(self.prior, z)
        zero = torch.zeros(x_t.shape[0], 1, dtype=DTYPE)
        return {"re_x": re_x, "re_y": zero, "kl_z": kl, "kl_u": zero}

    def forward(self, x_t, y_t, noise, kl_mode="sample", elementwise=False):
        pieces = self.loss_pieces(x_t, y_t, noise, kl_mode)
        return pieces if elementwise else ElboTerms.from_pieces(pieces)

    def log_weight(self, x_t, y_t, noise):
        q = self.q_z(x_t)
        z = gaussian_sample(q, noise["z"])
        return dlogistic_log_prob(self.p_x(z), x_t) + flow_log_prob(self.prior, z) - gaussian_log_prob(q, z)


class SrvaeModel(_Base):
    def __init__(self, config: ModelConfig):
        super().__init__(config)
        c, hid = config.channels, config.hidden
        cells = config.grid[0] * config.grid[1]
        self.c_u = config.latent_k // cells
        self.c_z = config.latent_m // cells
        self.enc_u = GaussianEncoder(c, hid, self.c_u, (1, 2, 1))
        self.enc_z = GaussianEncoder(c, hid, self.c_z, (1, 2, 2))
        self.prior_u = FlowPrior(config.latent_k, config.flow_depth, config.flow_hidden or None)
        self.dec_y = MixtureDecoder(self.c_u, hid, c, config.n_mix)
        self.cond_z = GaussianEncoder(c + self.c_u, hid, self.c_z, (1, 2, 1))
        self.dec_x = MixtureDecoder(c + self.c_z, hid, c, config.n_mix)
        self._init()

    @property
    def prior(self):
        return self.prior_u

    # conditionals ---------------------------------------------------------

    def q_u(self, y_t) -> DiagGaussianParams:
        return self.enc_u(to_unit_scale(y_t))

    def q_z(self, x_t) -> DiagGaussianParams:
        return self.enc_z(to_unit_scale(x_t))

    def p_y(self, u) -> DLogisticMixtureParams:
        return self.dec_y(_up_nearest(self._as_grid(u)))

    def p_z(self, y_t, u) -> DiagGaussianParams:
        return self.cond_z(torch.cat([to_unit_scale(y_t), _up_nearest(self._as_grid(u))], dim=1))

    def p_x(self, z, y_t) -> DLogisticMixtureParams:
        cfg = self.config
        z_img = _up_bilinear(self._as_grid(z), (cfg.height, cfg.width))
        return self.dec_x(torch.cat([_up_nearest(to_unit_scale(y_t)), z_img], dim=1))

    def draw_noise(self, rng: RngStream, batch: int) -> dict:
        """u-noise is drawn before z-noise."""
        return {
            "u": rng.normal_tensor(batch, self.config.latent_k),
            "z": rng.normal_tensor(batch, self.config.latent_m),
        }

    def _latents(self, x_t, y_t, noise):
        qu, qz = self.q_u(y_t), self.q_z(x_t)
        return qu, qz, gaussian_sample(qu, noise["u"]), gaussian_sample(qz, noise["z"])

    def loss_pieces(self, x_t, y_t, noise, kl_mode="analytic") -> dict:
        """Per-element contributions to each loss term, each shaped (B, ...)."""
        qu, qz, u, z = self._latents(x_t, y_t, noise)
        re_y = -dlogistic_log_prob(self.p_y(u), y_t, reduce=False)
        re_x = -dlogistic_log_prob(self.p_x(z, y_t), x_t, reduce=False)
        pz = self.p_z(y_t, u)
        if kl_mode == "analytic":
            kl_z = gaussian_kl_elementwise(qz, pz)
        elif kl_mode == "sample":
            kl_z = gaussian_log_prob_elementwise(qz, z) - gaussian_log_prob_elementwise(pz, z)
        else:
            raise ValueError(f"kl_mode must be 'analytic' or 'sample', got {kl_mode!r}")
        kl_u = gaussian_log_prob_elementwise(qu, u) - flow_log_prob_elementwise(self.prior_u, u)
        return {"re_x": re_x, "re_y": re_y, "kl_z": kl_z, "kl_u": kl_u}

    def forward(self, x_t, y_t, noise, kl_mode="analytic", elementwise=False):
        pieces = self.loss_pieces(x_t, y_t, noise, kl_mode)
        return pieces if elementwise else ElboTerms.from_pieces(pieces)

    def log_joint(self, x_t, y_t, z, u):
        """log p(x|y,z) + log p(z|y,u) + log p(y|u) + log p(u)."""
        return (
            dlogistic_log_prob(self.p_x(z, y_t), x_t)
            + gaussian_log_prob(self.p_z(y_t, u), z)
            + dlogistic_log_prob(self.p_y(u), y_t)
            + flow_log_prob(self.prior_u, u)
        )

    def log_posterior(self, x_t, y_t, z, u):
        """log q(z|x) + log q(u|y); the point mass q(y|x) is the caller's business."""
        return gaussian_log_prob(self.q_z(x_t), z) + gaussian_log_prob(self.q_u(y_t), u)

    def log_weight(self, x_t, y_t, noise):
        _, _, u, z = self._latents(x_t, y_t, noise)
        return self.log_joint(x_t, y_t, z, u) - self.log_posterior(x_t, y_t, z, u)


def build_vae(config: ModelConfig) -> VaeModel:
    return VaeModel(config)


def build_srvae(config: ModelConfig) -> SrvaeModel:
    return SrvaeModel(config)


def build_model(config: ModelConfig):
    return build_srvae(config) if config.kind == "srvae" else build_vae(config)


# --------------------------------------------------------------------------
# Batching helpers
# --------------------------------------------------------------------------


def _as_batch(images) -> tuple[np.ndarray, bool]:
    arr = np.asarray(images)
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim != 4:
        raise ValueError(f"expected (H, W, C) or (B, H, W, C) images, got shape {arr.shape}")
    return arr, False


def to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2))).long()


def to_images(t: torch.Tensor) -> np.ndarray:
    return t.permute(0, 2, 3, 1).numpy().astype(np.uint8)


def _check_extents(model, arr: np.ndarray, factor: int = 1):
    cfg = model.config
    want = (cfg.height // factor, cfg.width // factor, cfg.channels)
    if tuple(arr.shape[1:]) != want:
        raise ValueError(f"image extents {tuple(arr.shape[1:])} do not match model extents {want}")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ValueError("pixel values must lie in [0, 255]")


def prepare_batch(model, x) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
    """uint8 images -> (x, y) long tensors; y is None for the VAE."""
    arr, _ = _as_batch(x)
    _check_extents(model, arr)
    y_t = to_tensor(downscale(arr)) if isinstance(model, SrvaeModel) else None
    return to_tensor(arr), y_t


# --------------------------------------------------------------------------
# Objectives
# --------------------------------------------------------------------------


def _noise(model, rng, noise, batch):
    if noise is not None:
        return noise
    if rng is None:
        raise ValueError("need either rng or explicit noise")
    return model.draw_noise(rng, batch)


def vae_elbo(model: VaeModel, x, rng: RngStream = None, noise=None) -> ElboTerms:
    """Single-sample flow-prior ELBO; the kl_z slot holds log q(z|x) - log p(z)."""
    x_t, _ = prepare_batch(model, x)
    return model(x_t, None, _noise(model, rng, noise, x_t.shape[0])).check_finite()


def srvae_elbo(model: SrvaeModel, x, rng: RngStream = None, noise=None, kl_mode: str = "analytic") -> ElboTerms:
    """Single-sample two-level ELBO.

    ``kl_mode="analytic"`` uses the closed-form KL(q(z|x) || p(z|y,u)) at the
    sampled u; ``"sample"`` uses the log-ratio at the sampled z, which makes
    ``-elbo_loss`` equal to the importance log-weight of the same draw.
    """
    x_t, y_t = prepare_batch(model, x)
    return model(x_t, y_t, _noise(model, rng, noise, x_t.shape[0]), kl_mode).check_finite()


def elbo(model, x, rng: RngStream = None, noise=None, kl_mode: str = "analytic") -> ElboTerms:
    if isinstance(model, SrvaeModel):
        return srvae_elbo(model, x, rng, noise, kl_mode)
    return vae_elbo(model, x, rng, noise)


def elbo_identity_check(model: SrvaeModel, x, rng: RngStream, y=None) -> float:
    """max |(log p(x,w) - log q(w|x)) - (-elbo_loss)| over the batch, one shared draw.

    The left side is assembled from the joint and posterior factorizations;
    the right from the four RE/KL terms (with the single-draw z log-ratio so
    both sides see the same z). Passing ``y`` off the support of q(y|x)
    raises :class:`OffSupportError`.
    """
    arr, _ = _as_batch(x)
    x_t, y_t = prepare_batch(model, arr)
    noise = model.draw_noise(rng, x_t.shape[0])
    y_arr = downscale(arr) if y is None else _as_batch(y)[0]
    log_q_y = degenerate_log_mass(y_arr, arr)
    if log_q_y == OFF_SUPPORT:
        raise OffSupportError("y is not downscale(x): log q(y|x) is -inf")
    y_t = to_tensor(y_arr)
    with torch.no_grad():
        _, _, u, z = model._latents(x_t, y_t, noise)
        direct = model.log_joint(x_t, y_t, z, u) - (model.log_posterior(x_t, y_t, z, u) + log_q_y)
        four_term = -model(x_t, y_t, noise, kl_mode="sample").elbo_loss()
    return float((direct - four_term).abs().max())


def kl_z_per_dim(model, x, rng: RngStream) -> torch.Tensor:
    """Batch-mean analytic KL per latent coordinate of z (posterior-collapse probe).

    srVAE: KL(q(z|x) || p(z|y,u)) at a sampled u. VAE: KL(q(z|x) || N(0, I)),
    since the flow prior has no per-coordinate form.
    """
    x_t, y_t = prepare_batch(model, x)
    with torch.no_grad():
        if isinstance(model, SrvaeModel):
            noise = model.draw_noise(rng, x_t.shape[0])
            qu, qz, u, _ = model._latents(x_t, y_t, noise)
            kl = gaussian_kl_elementwise(qz, model.p_z(y_t, u))
        else:
            qz = model.q_z(x_t)
            kl = gaussian_kl_elementwise(qz, DiagGaussianParams.standard(qz.mean.shape))
    return kl.mean(dim=0)


def loss_vector(pieces: dict) -> torch.Tensor:
    """All loss pieces flattened into one vector; its sum is the batch elbo_loss."""
    return torch.cat([v.flatten() for v in pieces.values()])


def flat_param_function(model, fn):
    """Wrap ``fn(model) -> scalar`` as a function of one flat parameter vector.

    Returns ``(f, flat0)`` for use with :func:`srvae.numerics.grad_check`.
    """
    names = [n for n, _ in model.named_parameters()]
    shapes = [p.shape for _, p in model.named_parameters()]
    sizes = [p.numel() for _, p in model.named_parameters()]
    flat0 = torch.cat([p.detach().reshape(-1) for _, p in model.named_parameters()])

    def f(flat):
        chunks = torch.split(flat, sizes)
        params = {n: c.view(s) for n, c, s in zip(names, chunks, shapes)}
        return fn(lambda *args, **kw: torch.func.functional_call(model, params, args, kw))

    return f, flat0


# --------------------------------------------------------------------------
# Pipelines
# --------------------------------------------------------------------------


def generate(model, rng: RngStream, n: int = 1):
    """Ancestral sampling. Returns a list of ``(y, x)``; y is None for the VAE."""
    with torch.no_grad():
        if isinstance(model, SrvaeModel):
            u = flow_sample(model.prior_u, rng, n)
            y_t = dlogistic_sample(model.p_y(u), rng)
            z = gaussian_sample(model.p_z(y_t, u), rng.normal_tensor(n, model.config.latent_m))
            x_t = dlogistic_sample(model.p_x(z, y_t), rng)
            return list(zip(to_images(y_t), to_images(x_t)))
        z = flow_sample(model.prior, rng, n)
        x_t = dlogistic_sample(model.p_x(z), rng)
        return [(None, x) for x in to_images(x_t)]


def super_resolve(model: SrvaeModel, y, rng: RngStream) -> np.ndarray:
    """u ~ q(u|y), z ~ p(z|y,u), x ~ p(x|z,y)."""
    arr, single = _as_batch(y)
    _check_extents(model, arr, factor=2)
    y_t = to_tensor(arr)
    n = y_t.shape[0]
    with torch.no_grad():
        u = gaussian_sample(model.q_u(y_t), rng.normal_tensor(n, model.config.latent_k))
        z = gaussian_sample(model.p_z(y_t, u), rng.normal_tensor(n, model.config.latent_m))
        out = to_images(dlogistic_sample(model.p_x(z, y_t), rng))
    return out[0] if single else out


def reconstruct(model, x, rng: RngStream) -> np.ndarray:
    """y = downscale(x), z ~ q(z|x), x' ~ p(x|z,y)  (VAE: z ~ q(z|x), x' ~ p(x|z))."""
    arr, single = _as_batch(x)
    x_t, y_t = prepare_batch(model, arr)
    n = x_t.shape[0]
    with torch.no_grad():
        z = gaussian_sample(model.q_z(x_t), rng.normal_tensor(n, model.config.latent_m))
        params = model.p_x(z, y_t) if isinstance(model, SrvaeModel) else model.p_x(z)
        out = to_images(dlogistic_sample(params, rng))
    return out[0] if single else out


def generative_reconstruct(model: SrvaeModel, x, rng: RngStream, return_y: bool = False):
    """y* = downscale(x), u ~ q(u|y*), y ~ p(y|u), z ~ p(z|y,u), x' ~ p(x|z,y)."""
    arr, single = _as_batch(x)
    _, y_star = prepare_batch(model, arr)
    n = y_star.shape[0]
    with torch.no_grad():
        u = gaussian_sample(model.q_u(y_star), rng.normal_tensor(n, model.config.latent_k))
        y_t = dlogistic_sample(model.p_y(u), rng)
        z = gaussian_sample(model.p_z(y_t, u), rng.normal_tensor(n, model.config.latent_m))
        x_out = to_images(dlogistic_sample(model.p_x(z, y_t), rng))
    y_out = to_images(y_t)
    if single:
        x_out, y_out = x_out[0], y_out[0]
    return (x_out, y_out) if return_y else x_out
