"""The ten acceptance criteria, each at its stated tolerance.

Every test records a one-line verdict in ``conftest.ACCEPTANCE``; the
terminal summary prints them in order after the run.
"""
import math
import subprocess
import sys
import time
from contextlib import contextmanager

import numpy as np
import torch

from srvae.distributions import DiagGaussianParams, DLogisticMixtureParams, dlogistic_pmf, gaussian_kl, gaussian_log_prob, gaussian_sample
from srvae.downscale import downscale
from srvae.evaluation import bits_per_dim, iw_nll
from srvae.flow import flow_log_prob
from srvae.models import (
    build_model,
    elbo_identity_check,
    flat_param_function,
    generate,
    generative_reconstruct,
    kl_z_per_dim,
    loss_vector,
    prepare_batch,
    preset,
    reconstruct,
    super_resolve,
)
from srvae.numerics import RngStream, grad_check, rng_stream

from conftest import ACCEPTANCE, TOY_STEPS, TRAIN_SECONDS
from oracles import fit_encoder, grid_nll_2d, oracle_inputs, oracle_vae, random_flow


@contextmanager
def criterion(n, budget=None):
    """Yields a dict; its "line" entry becomes the report. Failures are recorded, then re-raised."""
    rec = {"line": ""}
    start = time.perf_counter()
    try:
        yield rec
    except BaseException as e:
        ACCEPTANCE[n] = ("FAIL", f"{rec['line']}  [{type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}]")
        raise
    elapsed = time.perf_counter() - start + rec.get("extra_seconds", 0.0)
    timing = f"  ({elapsed:.1f} s" + (f", budget {budget} s)" if budget else ")")
    if budget and elapsed > budget:
        ACCEPTANCE[n] = ("FAIL", rec["line"] + timing + " over budget")
        raise AssertionError(f"criterion {n} took {elapsed:.1f} s, budget {budget} s")
    ACCEPTANCE[n] = ("PASS", rec["line"] + timing)


def test_criterion_01_elbo_identity():
    with criterion(1, budget=60) as rec:
        worst = 0.0
        for i in range(100):
            model = build_model(preset("tiny", seed=i))
            x = np.random.default_rng(i).integers(0, 256, size=(2, 8, 8, 1)).astype(np.uint8)
            worst = max(worst, elbo_identity_check(model, x, RngStream(i)))
        rec["line"] = f"ELBO identity, 100 triples: max |direct - four-term| = {worst:.2e} nats (< 1e-6)"
        assert worst < 1e-6


def test_criterion_02_flow():
    with criterion(2, budget=60) as rec:
        gen = torch.Generator().manual_seed(2)
        trip, anti = 0.0, 0.0
        for dim, depth in [(1, 1), (2, 4), (3, 2), (8, 8), (17, 5), (32, 8), (64, 8)]:
            flow = random_flow(dim, depth, seed=100 + dim)
            u = torch.randn(64, dim, generator=gen, dtype=torch.float64) * 2
            with torch.no_grad():
                v, ld_inv = flow.inverse(u)
                u2, ld_fwd = flow(v)
            trip = max(trip, float((u2 - u).abs().max()))
            anti = max(anti, float((ld_inv + ld_fwd).abs().max()))
        flow = random_flow(1, 4, seed=1)
        grid = np.linspace(-10, 10, 4001)
        with torch.no_grad():
            dens = flow_log_prob(flow, torch.from_numpy(grid).reshape(-1, 1)).exp().numpy()
        mass = float(np.trapezoid(dens, grid))
        rec["line"] = (f"flow: round trip {trip:.1e} (< 1e-8), log-det antisymmetry {anti:.1e} (< 1e-10), "
                       f"1-D mass {mass:.6f} (1 +/- 1e-3)")
        assert trip < 1e-8 and anti < 1e-10 and abs(mass - 1.0) < 1e-3


def test_criterion_03_pmf_normalization():
    with criterion(3, budget=10) as rec:
        rng = RngStream(3)
        worst = 0.0
        for i in range(100):
            n_mix = 1 + i % 5
            logits = torch.from_numpy(rng.normal(n_mix) * 2)
            means = torch.from_numpy(rng.uniform(n_mix) * 2.4 - 1.2)
            log_scales = torch.from_numpy(rng.uniform(n_mix) * 8 - 7)
            total = float(dlogistic_pmf(DLogisticMixtureParams(logits[None], means[None], log_scales[None])).sum())
            worst = max(worst, abs(total - 1.0))
        rec["line"] = f"PMF normalization, 100 settings: max |sum - 1| = {worst:.1e} (< 1e-9)"
        assert worst < 1e-9


def test_criterion_04_gradient_check():
    with criterion(4, budget=300) as rec:
        model = build_model(preset("tiny", seed=0))
        x = np.random.default_rng(0).integers(0, 256, size=(2, 8, 8, 1)).astype(np.uint8)
        x_t, y_t = prepare_batch(model, x)
        noise = model.draw_noise(rng_stream(0), len(x))
        f, p0 = flat_param_function(model, lambda call: loss_vector(call(x_t, y_t, noise, elementwise=True)))
        err = grad_check(f, p0, eps=1e-4)
        rec["line"] = f"gradient check, {p0.numel()} parameters: max relative error {err:.2e} (< 1e-4)"
        assert err < 1e-4


def test_criterion_05_oracle_nll():
    with criterion(5, budget=300) as rec:
        x = oracle_inputs()
        model = fit_encoder(oracle_vae(0.2), x, steps=400)
        exact = grid_nll_2d(model, x)
        est = iw_nll(model, x, 500, RngStream(0).child("iw"))
        err = np.abs(est - exact).max()
        rec["line"] = f"iw_nll(k=500) vs 301^2 quadrature on 5 inputs: max |diff| = {err:.4f} nats (< 0.02)"
        assert err < 0.02


def test_criterion_06_kl_vs_monte_carlo():
    with criterion(6) as rec:
        rng = RngStream(6)
        n, worst = 10_000, 0.0
        for _ in range(50):
            mq, lq, mp, lp = (torch.from_numpy(rng.normal((1, 4))) for _ in range(4))
            q = DiagGaussianParams(mq.expand(n, 4), lq.expand(n, 4))
            p = DiagGaussianParams(mp.expand(n, 4), lp.expand(n, 4))
            z = gaussian_sample(q, rng.normal_tensor(n, 4))
            ratio = gaussian_log_prob(q, z) - gaussian_log_prob(p, z)
            se = ratio.std().item() / math.sqrt(n)
            kl = gaussian_kl(DiagGaussianParams(mq, lq), DiagGaussianParams(mp, lp)).item()
            worst = max(worst, abs(ratio.mean().item() - kl) / se)
        rec["line"] = f"analytic KL vs 10 000-sample MC, 50 pairs: max deviation {worst:.2f} s.e. (< 3)"
        assert worst < 3


def test_criterion_07_trainability(trained_toy, toy_data):
    with criterion(7, budget=600) as rec:
        model, history = trained_toy
        rec["extra_seconds"] = TRAIN_SECONDS[0] if TRAIN_SECONDS else 0.0
        first, last = history[0]["elbo_loss"], history[-1]["elbo_loss"]
        per_dim = kl_z_per_dim(model, toy_data[1].images, RngStream(7)).numpy()
        active = int((per_dim > 0.01).sum())
        rec["line"] = (f"toy srVAE, {TOY_STEPS} steps: elbo_loss {first:.1f} -> {last:.1f} (ratio {last / first:.3f} <= 0.8); "
                       f"kl_z per dim mean {per_dim.mean():.3f}, min {per_dim.min():.3f}, max {per_dim.max():.3f}, "
                       f"{active}/{per_dim.size} dims > 0.01 nats")
        assert last <= 0.8 * first
        assert per_dim.sum() > 0 and active > 0


def test_criterion_08_bits_per_dim_arithmetic():
    with criterion(8) as rec:
        vae = bits_per_dim(5540 + 1966, 32, 32, 3)
        sr = bits_per_dim(5107 + 1241 + 619 + 819, 32, 32, 3)
        rec["line"] = f"bits/dim: flow-prior VAE {vae:.4f} (3.525 +/- 0.001), srVAE {sr:.4f} (3.657 +/- 0.001)"
        assert abs(vae - 3.525) <= 1e-3 and abs(sr - 3.657) <= 1e-3


DETERMINISM_CFG = """\
model = srvae
out_dir = {out}
height = 16
width = 16
channels = 3
latent_k = 16
latent_m = 16
n_mix = 2
flow_depth = 2
hidden = 8
epochs = 3
batch_size = 16
checkpoint_interval = 1
toy_n = 48
toy_test_n = 8
seed = 9
"""

PIPELINE_COMMANDS = [
    ["sample", "--n", "6", "--cols", "3"],
    ["superres", "--index", "0", "3"],
    ["reconstruct", "--index", "1", "2"],
    ["genrecon", "--index", "0", "5"],
]


def _cli_run(cfg, in_process):
    for extra in [["train"]] + PIPELINE_COMMANDS:
        argv = [extra[0], "--config", str(cfg)] + extra[1:]
        if in_process:
            from srvae.cli import run
            assert run(argv) == 0
        else:
            subprocess.run([sys.executable, "-m", "srvae"] + argv, check=True, capture_output=True)


def test_criterion_09_determinism(tmp_path):
    with criterion(9) as rec:
        dirs = []
        for name, in_process in (("a", True), ("b", False)):
            cfg = tmp_path / f"{name}.cfg"
            cfg.write_text(DETERMINISM_CFG.format(out=tmp_path / name), encoding="utf-8")
            _cli_run(cfg, in_process)
            dirs.append(tmp_path / name)
        names = sorted(p.name for p in dirs[0].iterdir() if p.name != "config.echo")
        assert names == sorted(p.name for p in dirs[1].iterdir() if p.name != "config.echo")
        differ = [n for n in names if (dirs[0] / n).read_bytes() != (dirs[1] / n).read_bytes()]
        ckpts = sum(n.endswith(".bin") for n in names)
        ppms = sum(n.endswith(".ppm") for n in names)
        rec["line"] = (f"two runs (in-process and subprocess): {len(names)} artifacts "
                       f"({ckpts} checkpoints, {ppms} PPMs, history.csv), {len(differ)} differ")
        assert "history.csv" in names and ckpts == 4 and ppms == 5
        assert not differ, differ


def _valid(img, shape):
    return img.dtype == np.uint8 and img.shape == shape


def test_criterion_10_pipelines(trained_toy, toy_data):
    with criterion(10) as rec:
        model, _ = trained_toy
        x = toy_data[1].images[:8]
        y = downscale(x)
        samples = generate(model, RngStream(10).child("generate"), 8)
        sr = super_resolve(model, y, RngStream(10).child("superres"))
        rec_x = reconstruct(model, x, RngStream(10).child("reconstruct"))
        gr_x, gr_y = generative_reconstruct(model, x, RngStream(10).child("genrecon"), return_y=True)
        checks = {
            "generate": all(_valid(s[0], (8, 8, 3)) and _valid(s[1], (16, 16, 3)) for s in samples),
            "superres": _valid(sr, (8, 16, 16, 3)) and downscale(sr).shape == y.shape,
            "reconstruct": _valid(rec_x, (8, 16, 16, 3)),
            "genrecon": _valid(gr_x, (8, 16, 16, 3)) and _valid(gr_y, (8, 8, 8, 3)),
        }
        rec["line"] = "pipelines on trained toy model: " + ", ".join(f"{k} {'ok' if v else 'BAD'}" for k, v in checks.items())
        assert all(checks.values())
