import re
import subprocess
import sys
from dataclasses import fields

import numpy as np
import pytest

from srvae.cli import ConfigError, HISTORY_COLUMNS, RunConfig, build_parser, parse_config, run
from srvae.evaluation import read_ppm

TINY_CFG = """\
# desk-scale smoke config
model = srvae
out_dir = {out}
height = 8
width = 8
latent_k = 8
latent_m = 8
n_mix = 1
flow_depth = 2
hidden = 8          # conv width
epochs = 2
batch_size = 8
toy_n = 16
toy_test_n = 4
seed = 3
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(TINY_CFG.format(out=tmp_path / "out"), encoding="utf-8")
    return p


@pytest.fixture
def trained(cfg_path, capsys):
    assert run(["train", "--config", str(cfg_path)]) == 0
    capsys.readouterr()
    return cfg_path, cfg_path.parent / "out"


# -- config parsing -----------------------------------------------------------------------


def test_parse_config_types_comments_and_overrides():
    cfg = parse_config("model = vae\nout_dir = /tmp/x  # trailing\n\n# c\nlearning_rate = 1e-3\nepochs=4\n",
                       ["epochs=7", "seed = 9"])
    assert cfg.model == "vae" and cfg.out_dir == "/tmp/x"
    assert cfg.learning_rate == 1e-3 and cfg.epochs == 7 and cfg.seed == 9
    assert isinstance(cfg.epochs, int) and isinstance(cfg.learning_rate, float)


@pytest.mark.parametrize("text,msg", [
    ("model = srvae\nout_dir = o\nlearning_rat = 1\n", "unknown key"),
    ("model = srvae\nout_dir = o\nepochs = ten\n", "cannot parse"),
    ("model = srvae\nout_dir = o\nepochs 3\n", "key = value"),
    ("out_dir = o\n", "missing required"),
    ("model = gan\nout_dir = o\n", "vae or srvae"),
    ("model = vae\nout_dir = o\ndataset = mnist\n", "toy or cifar10"),
])
def test_parse_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(text)


def test_config_echo_round_trips():
    cfg = parse_config("model = vae\nout_dir = o\nepochs = 3\n")
    assert parse_config(cfg.echo()) == cfg


@pytest.mark.parametrize("command", ["train", "eval", "sample", "superres", "reconstruct", "genrecon"])
def test_help_documents_every_key(command):
    sub = build_parser()._subparsers._group_actions[0].choices[command]
    text = sub.format_help()
    for f in fields(RunConfig):
        assert re.search(rf"^\s+{f.name}\s", text, re.M), f.name


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "srvae", "train", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "learning_rate" in out.stdout


# -- subcommands -----------------------------------------------------------------------------


def test_train_outputs(trained):
    _, out = trained
    lines = (out / "history.csv").read_bytes().decode().split("\n")
    assert lines[0] == ",".join(HISTORY_COLUMNS) and lines[-1] == "" and len(lines) == 4
    assert "\r" not in (out / "history.csv").read_text()
    assert lines[1].startswith("0,") and "," in lines[1] and ";" not in lines[1]
    assert (out / "checkpoint.bin").read_bytes()[:8] == b"SRVAE01\0"
    assert "epochs = 2" in (out / "config.echo").read_text()


def test_train_twice_identical_history(cfg_path, tmp_path):
    other = tmp_path / "other.cfg"
    other.write_text(TINY_CFG.format(out=tmp_path / "out2"))
    assert run(["train", "--config", str(cfg_path)]) == 0
    assert run(["train", "--config", str(other)]) == 0
    for name in ("history.csv", "checkpoint.bin"):
        assert (tmp_path / "out" / name).read_bytes() == (tmp_path / "out2" / name).read_bytes()


def test_eval_k1_equals_single_draw_elbo(trained, capsys):
    cfg, out = trained
    assert run(["eval", "--config", str(cfg), "--k", "1", "--n-eval", "4", "--frechet", "4"]) == 0
    text = capsys.readouterr().out
    single = float(re.search(r"single-draw elbo\s+(\S+)", text).group(1))
    nll = float(re.search(r"iw_nll \(k=1\)\s+(\S+)", text).group(1))
    assert nll == pytest.approx(single, abs=1e-8)
    assert "pixel-Fréchet (not FID)" in text
    assert (out / "eval.txt").read_text(encoding="utf-8") == text


def test_sample_canvas(trained):
    cfg, out = trained
    assert run(["sample", "--config", str(cfg), "--n", "16", "--cols", "4"]) == 0
    x = read_ppm(out / "samples.ppm")
    assert x.shape == (4 * 8 + 3 * 2, 4 * 8 + 3 * 2, 3)
    assert read_ppm(out / "samples_y.ppm").shape == (4 * 4 + 3 * 2, 4 * 4 + 3 * 2, 3)


@pytest.mark.parametrize("command,name,cols", [("superres", "superres.ppm", 3), ("reconstruct", "reconstruct.ppm", 2),
                                               ("genrecon", "genrecon.ppm", 3)])
def test_pipelines_by_index(trained, command, name, cols):
    cfg, out = trained
    assert run([command, "--config", str(cfg), "--index", "0", "2"]) == 0
    grid = read_ppm(out / name)
    assert grid.shape == (2 * 8 + 2, cols * 8 + (cols - 1) * 2, 3)


def test_pipeline_from_ppm_input(trained, tmp_path):
    cfg, out = trained
    img = np.random.default_rng(0).integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
    src = tmp_path / "in.ppm"
    src.write_bytes(b"P6\n8 8\n255\n" + img.tobytes())
    assert run(["reconstruct", "--config", str(cfg), "--input", str(src)]) == 0
    assert read_ppm(out / "reconstruct.ppm").shape == (8, 18, 3)
    low = tmp_path / "low.ppm"
    low.write_bytes(b"P6\n4 4\n255\n" + img[:4, :4].tobytes())
    assert run(["superres", "--config", str(cfg), "--input", str(low)]) == 0
    assert read_ppm(out / "superres.ppm").shape == (8, 18, 3)


def test_errors_exit_nonzero(trained, tmp_path, capsys):
    cfg, _ = trained
    bad = tmp_path / "bad.cfg"
    bad.write_text("model = srvae\nout_dir = x\nbogus = 1\n")
    assert run(["train", "--config", str(bad)]) != 0
    assert "unknown key" in capsys.readouterr().err
    assert run(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "none.bin")]) != 0
    assert "checkpoint not found" in capsys.readouterr().err
    assert run(["superres", "--config", str(cfg), "--index", "99"]) != 0
    assert "out of range" in capsys.readouterr().err
    assert run(["train", "--config", str(tmp_path / "missing.cfg")]) != 0


def test_vae_sample_has_no_y_grid(tmp_path):
    cfg = tmp_path / "vae.cfg"
    cfg.write_text(TINY_CFG.format(out=tmp_path / "v").replace("model = srvae", "model = vae"))
    assert run(["train", "--config", str(cfg), "--override", "epochs=1"]) == 0
    assert run(["sample", "--config", str(cfg), "--n", "4", "--cols", "2"]) == 0
    assert (tmp_path / "v" / "samples.ppm").exists() and not (tmp_path / "v" / "samples_y.ppm").exists()
    assert run(["superres", "--config", str(cfg)]) != 0
