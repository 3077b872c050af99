"""Command-line entry point: ``srvae <subcommand> --config run.cfg [--override key=value ...]``.

Config files are UTF-8 ``key = value`` lines; ``#`` starts a comment.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import evaluation as ev
from .data import gen_toy_shapes, load_cifar10_binary
from .downscale import downscale, upsample_nearest
from .models import (
    ModelConfig,
    SrvaeModel,
    build_model,
    elbo,
    generate,
    generative_reconstruct,
    reconstruct,
    super_resolve,
)
from .numerics import RngStream
from .training import TrainConfig, load_checkpoint, train

log = logging.getLogger("srvae")

HISTORY_COLUMNS = ("epoch", "re_x", "re_y", "kl_z", "kl_u", "elbo_loss", "bits_per_dim")


def _k(default, doc, required=False):
    return field(default=default, metadata={"doc": doc, "required": required})


@dataclass
class RunConfig:
    model: str = _k("srvae", "model family: vae | srvae", required=True)
    out_dir: str = _k("", "directory for checkpoints, history and images", required=True)
    seed: int = _k(0, "seed for initialization, shuffling, noise and sampling")
    height: int = _k(16, "image height (multiple of 4)")
    width: int = _k(16, "image width (multiple of 4)")
    channels: int = _k(3, "image channels")
    latent_k: int = _k(32, "dimension of u (srvae only)")
    latent_m: int = _k(32, "dimension of z")
    n_mix: int = _k(5, "logistic mixture components per subpixel")
    flow_depth: int = _k(8, "number of coupling layers in the prior")
    flow_hidden: int = _k(0, "coupling-net hidden width (0 = 4 * latent dim)")
    hidden: int = _k(32, "conv hidden width")
    learning_rate: float = _k(2e-3, "AdaMax learning rate")
    beta1: float = _k(0.9, "AdaMax beta1")
    beta2: float = _k(0.999, "AdaMax beta2")
    batch_size: int = _k(32, "minibatch size")
    epochs: int = _k(10, "training epochs")
    max_steps: int = _k(0, "cap on optimizer steps (0 = none)")
    clip_norm: float = _k(100.0, "global gradient-norm clip")
    kl_warmup_steps: int = _k(0, "linear KL warm-up length in steps (0 = off)")
    checkpoint_interval: int = _k(0, "extra checkpoint every N epochs (0 = final only)")
    dataset: str = _k("toy", "toy | cifar10")
    toy_n: int = _k(512, "toy training images")
    toy_test_n: int = _k(100, "toy test images")
    toy_seed: int = _k(0, "toy training seed; the test set uses toy_seed + 1")
    cifar_train: str = _k("", "comma-separated CIFAR-10 training batch files")
    cifar_test: str = _k("", "comma-separated CIFAR-10 test batch files")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            kind=self.model, height=self.height, width=self.width, channels=self.channels,
            latent_k=self.latent_k, latent_m=self.latent_m, n_mix=self.n_mix,
            flow_depth=self.flow_depth, flow_hidden=self.flow_hidden, hidden=self.hidden, seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, beta1=self.beta1, beta2=self.beta2,
            batch_size=self.batch_size, epochs=self.epochs, seed=self.seed, clip_norm=self.clip_norm,
            max_steps=self.max_steps, kl_warmup_steps=self.kl_warmup_steps,
            checkpoint_path=str(Path(self.out_dir) / "checkpoint.bin"),
            checkpoint_interval=self.checkpoint_interval,
        )

    def echo(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


class ConfigError(ValueError):
    pass


def _parse_value(name: str, typ, text: str):
    try:
        if typ in (int, "int"):
            return int(text)
        if typ in (float, "float"):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {typ}") from None


def parse_config(text: str, overrides: Optional[List[str]] = None) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    entries = [(i + 1, line) for i, line in enumerate(text.splitlines())]
    entries += [(f"--override {o}", o) for o in overrides or []]
    for where, line in entries:
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {where}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {where}: unknown key {key!r}")
        values[key] = _parse_value(key, types[key], val)
    missing = [f.name for f in fields(RunConfig) if f.metadata["required"] and f.name not in values]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    cfg = RunConfig(**values)
    if cfg.model not in ("vae", "srvae"):
        raise ConfigError(f"model must be vae or srvae, got {cfg.model!r}")
    if cfg.dataset not in ("toy", "cifar10"):
        raise ConfigError(f"dataset must be toy or cifar10, got {cfg.dataset!r}")
    return cfg


def _datasets(cfg: RunConfig):
    if cfg.dataset == "toy":
        if cfg.height != cfg.width or cfg.channels != 3:
            raise ConfigError("toy data is square RGB: need height == width and channels = 3")
        return (gen_toy_shapes(cfg.toy_n, cfg.height, cfg.toy_seed),
                gen_toy_shapes(cfg.toy_test_n, cfg.height, cfg.toy_seed + 1))
    paths = lambda s: [p.strip() for p in s.split(",") if p.strip()]
    if not paths(cfg.cifar_train):
        raise ConfigError("dataset = cifar10 needs cifar_train")
    train_ds = load_cifar10_binary(paths(cfg.cifar_train))
    test_ds = load_cifar10_binary(paths(cfg.cifar_test)) if paths(cfg.cifar_test) else train_ds
    return train_ds, test_ds


def write_history(history, path) -> None:
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append(",".join(str(row["epoch"]) if c == "epoch" else repr(float(row[c])) for c in HISTORY_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(cfg.echo(), encoding="utf-8", newline="\n")
    return out


def _load_model(cfg: RunConfig, args):
    path = Path(args.checkpoint or Path(cfg.out_dir) / "checkpoint.bin")
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, _, _ = load_checkpoint(path)
    return model


def cmd_train(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg)
    train_ds, _ = _datasets(cfg)
    model = build_model(cfg.model_config())
    _, history, _ = train(model, train_ds, cfg.train_config())
    write_history(history, out / "history.csv")
    last = history[-1]
    print(f"trained {len(history)} epochs: elbo_loss {last['elbo_loss']:.4f}  bits/dim {last['bits_per_dim']:.4f}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg)
    model = _load_model(cfg, args)
    _, test_ds = _datasets(cfg)
    x = test_ds.images[: args.n_eval]
    h, w, c = x.shape[1:]
    root = RngStream(cfg.seed).child("eval")
    terms = elbo(model, x, root.child("elbo")).means()
    single = elbo(model, x, root.child("iw"), kl_mode="sample").elbo_loss().detach().numpy()
    nll = ev.iw_nll(model, x, args.k, root.child("iw"))
    lines = [f"images evaluated     {len(x)}"]
    lines += [f"{name:<20} {terms[name]:.6f}" for name in ("re_x", "re_y", "kl_z", "kl_u", "elbo_loss")]
    lines.append(f"{'elbo bits/dim':<20} {ev.bits_per_dim(terms['elbo_loss'], h, w, c):.6f}")
    lines.append(f"{'single-draw elbo':<20} {float(single.mean()):.10f}")
    lines.append(f"{f'iw_nll (k={args.k})':<20} {float(nll.mean()):.10f}")
    lines.append(f"{'iw bits/dim':<20} {ev.bits_per_dim(float(nll.mean()), h, w, c):.6f}")
    if args.frechet:
        n = args.frechet
        gen = np.stack([s[1] for s in generate(model, root.child("frechet"), n)])
        real = test_ds.images[:n]
        dist = ev.pixel_frechet(ev.pixel_stats(gen, args.pool), ev.pixel_stats(real, args.pool))
        lines.append(f"{ev.PIXEL_FRECHET_LABEL:<20} {dist:.6f}")
    report = "\n".join(lines) + "\n"
    (out / "eval.txt").write_text(report, encoding="utf-8", newline="\n")
    sys.stdout.write(report)
    return 0


def cmd_sample(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg)
    model = _load_model(cfg, args)
    samples = generate(model, RngStream(cfg.seed).child("sample"), args.n)
    ev.write_ppm_grid([x for _, x in samples], args.cols, out / "samples.ppm")
    if isinstance(model, SrvaeModel):
        ev.write_ppm_grid([y for y, _ in samples], args.cols, out / "samples_y.ppm")
    print(f"wrote {args.n} samples to {out}")
    return 0


def _inputs(cfg: RunConfig, args, half: bool):
    """(inputs, ground truth or None) from --input PPM files or --index into the test set."""
    if args.input:
        imgs = np.stack([ev.read_ppm(p) for p in args.input])
        if cfg.channels == 1 and imgs.shape[-1] == 3:
            imgs = imgs[..., :1]
        return imgs, None
    _, test_ds = _datasets(cfg)
    idx = args.index or [0]
    if max(idx) >= len(test_ds):
        raise IndexError(f"index {max(idx)} out of range for test set of {len(test_ds)}")
    x = test_ds.images[idx]
    return (downscale(x) if half else x), x


def cmd_superres(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg)
    model = _require_srvae(_load_model(cfg, args))
    y, x = _inputs(cfg, args, half=True)
    x_hat = super_resolve(model, y, RngStream(cfg.seed).child("superres"))
    tiles, cols = [], 3 if x is not None else 2
    for i in range(len(y)):
        tiles += [upsample_nearest(y[i])] + ([x[i]] if x is not None else []) + [x_hat[i]]
    ev.write_ppm_grid(tiles, cols, out / "superres.ppm")
    print(f"wrote {out / 'superres.ppm'}")
    return 0


def cmd_reconstruct(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg)
    model = _load_model(cfg, args)
    x, _ = _inputs(cfg, args, half=False)
    x_hat = reconstruct(model, x, RngStream(cfg.seed).child("reconstruct"))
    ev.write_ppm_grid([t for pair in zip(x, x_hat) for t in pair], 2, out / "reconstruct.ppm")
    print(f"wrote {out / 'reconstruct.ppm'}")
    return 0


def cmd_genrecon(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg)
    model = _require_srvae(_load_model(cfg, args))
    x, _ = _inputs(cfg, args, half=False)
    x_hat, y = generative_reconstruct(model, x, RngStream(cfg.seed).child("genrecon"), return_y=True)
    tiles = [t for i in range(len(x)) for t in (x[i], upsample_nearest(y[i]), x_hat[i])]
    ev.write_ppm_grid(tiles, 3, out / "genrecon.ppm")
    print(f"wrote {out / 'genrecon.ppm'}")
    return 0


def _require_srvae(model):
    if not isinstance(model, SrvaeModel):
        raise ConfigError("this pipeline needs an srvae checkpoint")
    return model


COMMANDS = {
    "train": (cmd_train, "train a model; writes checkpoint.bin and history.csv"),
    "eval": (cmd_eval, "ELBO terms, bits/dim and importance-weighted NLL on the test set"),
    "sample": (cmd_sample, "unconditional samples (samples.ppm, plus samples_y.ppm for srvae)"),
    "superres": (cmd_superres, "super-resolve low-resolution inputs: y | x | x_hat rows"),
    "reconstruct": (cmd_reconstruct, "reconstruct inputs: x | x_hat rows"),
    "genrecon": (cmd_genrecon, "generative reconstruction: x | resampled y | x_hat rows"),
}


def _keys_help() -> str:
    rows = ["config keys (key = value):"]
    for f in fields(RunConfig):
        req = " [required]" if f.metadata["required"] else f" (default {f.default!r})"
        rows.append(f"  {f.name:<20} {f.metadata['doc']}{req}")
    return "\n".join(rows)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srvae", description="Super-resolution VAE and flow-prior VAE.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, summary) in COMMANDS.items():
        p = sub.add_parser(name, help=summary, description=summary, epilog=_keys_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", required=True, help="path to the key = value config file")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        if name != "train":
            p.add_argument("--checkpoint", help="checkpoint path (default <out_dir>/checkpoint.bin)")
        if name == "eval":
            p.add_argument("--k", type=int, default=500, help="importance samples for iw_nll")
            p.add_argument("--n-eval", type=int, default=16, help="test images to evaluate")
            p.add_argument("--frechet", type=int, default=0, help="images for pixel-Fréchet (0 = skip)")
            p.add_argument("--pool", type=int, default=1, help="average-pool factor before pixel-Fréchet")
        if name == "sample":
            p.add_argument("--n", type=int, default=16, help="number of samples")
            p.add_argument("--cols", type=int, default=4, help="grid columns")
        if name in ("superres", "reconstruct", "genrecon"):
            p.add_argument("--input", nargs="+", help="PPM input image(s)")
            p.add_argument("--index", type=int, nargs="+", help="test-set indices (default 0)")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        text = Path(args.config).read_text(encoding="utf-8")
        cfg = parse_config(text, args.override)
        return COMMANDS[args.command][0](cfg, args)
    except (OSError, ValueError, KeyError, IndexError, ArithmeticError, RuntimeError) as e:
        print(f"srvae {args.command}: error: {e}", file=sys.stderr)
        return 1


def main():
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    sys.exit(run())


if __name__ == "__main__":
    main()
