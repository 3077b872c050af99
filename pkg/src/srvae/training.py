"""AdaMax training loop and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"SRVAE01\\0"
    payload:
        u64 metadata length, UTF-8 ``key=value`` lines
        per tensor: u64 name length, name, u64 rank, rank x u64 extents,
                    float32 values in row-major order
    u32 CRC32 of the payload
"""
from __future__ import annotations

import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .data import ImageDataset
from .evaluation import bits_per_dim
from .models import ElboTerms, ModelConfig, build_model, prepare_batch
from .numerics import DTYPE, NonFiniteError, RngStream

log = logging.getLogger(__name__)

MAGIC = b"SRVAE01\0"
ADAMAX_EPS = 1e-8
TERM_NAMES = ("re_x", "re_y", "kl_z", "kl_u")


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    clip_norm: float = 100.0
    max_steps: int = 0  # 0: no cap
    kl_warmup_steps: int = 0  # 0: full KL weight from the start
    checkpoint_path: Optional[str] = None
    checkpoint_interval: int = 0  # epochs; 0 writes only the final checkpoint

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass
class AdaMaxState:
    m: dict = field(default_factory=dict)
    u_inf: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdaMaxState":
        return cls(
            {k: torch.zeros_like(p, dtype=DTYPE) for k, p in params.items()},
            {k: torch.zeros_like(p, dtype=DTYPE) for k, p in params.items()},
            0,
        )


def adamax_step(params: dict, grads: dict, state: AdaMaxState, cfg: TrainConfig):
    """One in-place AdaMax update; returns ``(params, state)``.

    Inputs are validated before anything is touched, so a rejected step
    leaves both parameters and state unchanged.
    """
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ValueError(f"shape mismatch for parameter {k}")
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {k}")
    state.t += 1
    step = cfg.learning_rate / (1.0 - cfg.beta1 ** state.t)
    with torch.no_grad():
        for k, p in params.items():
            g = grads[k]
            m = state.m[k].mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
            u = torch.maximum(state.u_inf[k] * cfg.beta2, g.abs())
            state.u_inf[k] = u
            p.sub_(step * m / (u + ADAMAX_EPS))
    return params, state


def _clip_global_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g.mul_(scale)
    return total


def shuffle_order(n: int, seed: int, epoch: int) -> np.ndarray:
    keys = RngStream(seed).child(f"shuffle/{epoch}").uniform(n)
    return np.argsort(keys, kind="stable")


def train(model, dataset: ImageDataset, cfg: TrainConfig, state: Optional[AdaMaxState] = None,
          on_epoch: Optional[Callable[[dict], None]] = None):
    """Minimize the mean per-example ELBO loss. Returns ``(model, history, state)``.

    ``history`` holds one dict per epoch with the mean of each loss term,
    ``elbo_loss`` and ``bits_per_dim``. A non-finite loss raises
    :class:`TrainingDiverged`; checkpoints already on disk stay untouched.
    """
    params = dict(model.named_parameters())
    state = state or AdaMaxState.zeros_like(params)
    images = dataset.images
    n = len(images)
    h, w, c = dataset.extents
    root = RngStream(cfg.seed)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        if cfg.max_steps and step >= cfg.max_steps:
            break
        order = shuffle_order(n, cfg.seed, epoch)
        sums = dict.fromkeys(TERM_NAMES + ("elbo_loss",), 0.0)
        seen = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            if cfg.max_steps and step >= cfg.max_steps:
                break
            batch = images[order[start:start + cfg.batch_size]]
            x_t, y_t = prepare_batch(model, batch)
            noise = model.draw_noise(root.child(f"noise/{epoch}/{b}"), len(batch))
            terms: ElboTerms = model(x_t, y_t, noise)
            beta = min(1.0, step / cfg.kl_warmup_steps) if cfg.kl_warmup_steps else 1.0
            loss = (terms.re_x + terms.re_y + beta * (terms.kl_z + terms.kl_u)).mean()
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")

            model.zero_grad(set_to_none=False)
            loss.backward()
            grads = {k: p.grad for k, p in params.items()}
            _clip_global_norm(grads, cfg.clip_norm)
            adamax_step(params, grads, state, cfg)
            step += 1

            for k, v in terms.means().items():
                sums[k] += v * len(batch)
            seen += len(batch)

        row = {"epoch": epoch, **{k: v / seen for k, v in sums.items()}}
        row["bits_per_dim"] = bits_per_dim(row["elbo_loss"], h, w, c)
        history.append(row)
        log.info("epoch %d  elbo_loss %.3f  bits/dim %.4f", epoch, row["elbo_loss"], row["bits_per_dim"])
        if cfg.checkpoint_path and cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0:
            save_checkpoint(model, state, _epoch_path(cfg.checkpoint_path, epoch), {"epoch": epoch, "step": step})
        if on_epoch:
            on_epoch(row)
    if cfg.checkpoint_path:
        save_checkpoint(model, state, cfg.checkpoint_path, {"epoch": len(history) - 1, "step": step})
    return model, history, state


def _epoch_path(path: str, epoch: int) -> str:
    p = Path(path)
    return str(p.with_name(f"{p.stem}_epoch{epoch:04d}{p.suffix}"))


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def _u64(v: int) -> bytes:
    return struct.pack("<Q", v)


def _tensor_record(name: str, t: torch.Tensor) -> bytes:
    raw = name.encode("utf-8")
    arr = t.detach().cpu().numpy().astype("<f4")
    head = _u64(len(raw)) + raw + _u64(arr.ndim) + b"".join(_u64(d) for d in arr.shape)
    return head + arr.tobytes()


def save_checkpoint(model, state: Optional[AdaMaxState], path, extra: Optional[dict] = None) -> None:
    tensors = [("model." + k, p) for k, p in model.named_parameters()]
    if state is not None:
        tensors += [("adamax.m." + k, v) for k, v in state.m.items()]
        tensors += [("adamax.u_inf." + k, v) for k, v in state.u_inf.items()]
    meta = {f"model.{k}": v for k, v in model.config.as_dict().items()}
    meta["adamax.t"] = state.t if state is not None else -1
    meta["tensors"] = len(tensors)
    meta.update(extra or {})
    meta_bytes = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
    payload = _u64(len(meta_bytes)) + meta_bytes + b"".join(_tensor_record(n, t) for n, t in tensors)
    Path(path).write_bytes(MAGIC + payload + struct.pack("<I", zlib.crc32(payload)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at payload offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def read_checkpoint(path):
    """Parse a checkpoint into ``(metadata dict, {name: float32 ndarray})``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}")
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated")
    payload, (crc,) = data[8:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    r = _Reader(payload)
    meta_text = r.take(r.u64()).decode("utf-8")
    meta = dict(line.split("=", 1) for line in meta_text.splitlines() if line)
    tensors = {}
    for _ in range(int(meta.get("tensors", 0))):
        name = r.take(r.u64()).decode("utf-8")
        shape = tuple(r.u64() for _ in range(r.u64()))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
    if r.pos != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - r.pos} trailing bytes after last tensor")
    return meta, tensors


def load_checkpoint(path):
    """Rebuild ``(model, AdaMaxState or None, metadata)`` from a checkpoint."""
    meta, tensors = read_checkpoint(path)
    model_cfg = ModelConfig.from_dict({k[6:]: v for k, v in meta.items() if k.startswith("model.")})
    model = build_model(model_cfg)
    params = dict(model.named_parameters())
    with torch.no_grad():
        for k, p in params.items():
            arr = tensors.get("model." + k)
            if arr is None:
                raise CheckpointError(f"{path}: missing tensor model.{k}")
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"{path}: tensor model.{k} has shape {arr.shape}, model expects {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr.astype(np.float64)))
    state = None
    t = int(meta.get("adamax.t", -1))
    if t >= 0:
        conv = lambda prefix: {k: torch.from_numpy(tensors[prefix + k].astype(np.float64)) for k in params}
        try:
            state = AdaMaxState(conv("adamax.m."), conv("adamax.u_inf."), t)
        except KeyError as e:
            raise CheckpointError(f"{path}: missing optimizer tensor {e}") from None
    return model, state, meta


def quantize_(model) -> None:
    """Round parameters to float32 in place: the precision checkpoints store."""
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(p.to(torch.float32).to(DTYPE))
