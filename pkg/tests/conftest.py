import time

import numpy as np
import pytest
import torch

from srvae.data import gen_toy_shapes
from srvae.models import build_model, preset
from srvae.training import TrainConfig, train

TOY_STEPS = 500
TRAIN_SECONDS = []

# criterion number -> (PASS/FAIL, summary line), filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        verdict, line = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {line}")


def f64(*shape, gen=None, scale=1.0):
    """float64 normal tensor from a torch Generator (tests only)."""
    return torch.randn(*shape, generator=gen, dtype=torch.float64) * scale


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture(scope="session")
def toy_data():
    return gen_toy_shapes(512, 16, 0), gen_toy_shapes(100, 16, 1)


@pytest.fixture(scope="session")
def trained_toy(toy_data):
    """srVAE on 512 toy shapes, 500 AdaMax steps at batch 32. Shared by the
    trainability criterion and every check that needs a trained model."""
    train_ds, _ = toy_data
    model = build_model(preset("toy"))
    cfg = TrainConfig(epochs=32, max_steps=TOY_STEPS, batch_size=32, seed=0)
    start = time.perf_counter()
    model, history, _ = train(model, train_ds, cfg)
    TRAIN_SECONDS.append(time.perf_counter() - start)
    model.eval()
    return model, history


@pytest.fixture
def tiny_srvae():
    return build_model(preset("tiny", seed=0))


@pytest.fixture
def tiny_images():
    return np.random.default_rng(0).integers(0, 256, size=(3, 8, 8, 1)).astype(np.uint8)
