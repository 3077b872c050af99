"""Super-resolution VAE (two-level, flow prior on u) and the single-level flow-prior VAE."""
from .models import (
    ElboTerms,
    ModelConfig,
    SrvaeModel,
    VaeModel,
    build_model,
    build_srvae,
    build_vae,
    elbo,
    elbo_identity_check,
    generate,
    generative_reconstruct,
    preset,
    reconstruct,
    srvae_elbo,
    super_resolve,
    vae_elbo,
)
from .numerics import RngStream, rng_stream

__version__ = "0.1.0"
