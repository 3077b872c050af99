"""Small network building blocks shared by the flow prior and the conditional nets."""
from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

from .numerics import DTYPE, RngStream

LN2 = math.log(2.0)


class SmoothELU(nn.Module):
    """softplus(x) - ln 2: ELU-shaped (linear above, saturating below, zero at 0) and C-infinity.

    Used in place of ELU so finite-difference gradient checks never straddle a kink.
    """

    def forward(self, x):
        return F.softplus(x) - LN2


def mlp(dim_in: int, hidden: int, dim_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim_in, hidden), SmoothELU(), nn.Linear(hidden, dim_out))


def conv3x3(c_in: int, c_out: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, kernel_size=3, stride=stride, padding=1)


def he_init_(module: nn.Module, rng: RngStream) -> None:
    """Seeded He (fan-in) init: weights ~ N(0, 2/fan_in), biases zero.

    Parameters are visited in ``named_parameters`` order and each draws from
    its own child stream, so adding a tensor does not reshuffle the others.
    """
    module.to(DTYPE)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
                continue
            fan_in = p[0].numel()
            noise = rng.child(name).normal_tensor(*p.shape)
            p.copy_(noise * math.sqrt(2.0 / fan_in))
