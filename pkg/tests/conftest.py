import os
from pathlib import Path

import numpy as np
import pytest

from ensemble_dae.datasets import make_synthetic
from ensemble_dae.nn import build_model, dense, fc_spec, ModelSpec

MNIST_DIR = Path(os.environ.get("MNIST_DIR", "/root/data/mnist"))
CACHE_DIR = Path(os.environ.get("ENSEMBLE_DAE_CACHE", Path(__file__).resolve().parents[1] / ".cache"))


def mnist_available():
    return (MNIST_DIR / "train-images-idx3-ubyte").exists() or (MNIST_DIR / "train-images-idx3-ubyte.gz").exists()


needs_mnist = pytest.mark.skipif(not mnist_available(), reason=f"MNIST not found in {MNIST_DIR}")


@pytest.fixture(scope="session")
def synthetic():
    return make_synthetic(300, seed=0)


@pytest.fixture(scope="session")
def small_fc(synthetic):
    """A small FC classifier trained for a few epochs on synthetic glyphs."""
    from ensemble_dae.nn import TrainConfig, train

    model = build_model(fc_spec("tiny-fc", [32]), seed=0)
    train(model, synthetic, TrainConfig(epochs=15, batch_size=50, lr=0.01))
    return model.quantized()


def linear_model(w, b, name="linear"):
    """Dense softmax classifier on flat inputs with the given weights."""
    w = np.asarray(w, dtype=np.float64)
    spec = ModelSpec(name, (w.shape[0],), (dense(w.shape[1], "softmax"),))
    model = build_model(spec)
    model.params["00.kernel"] = w
    model.params["00.bias"] = np.asarray(b, dtype=np.float64)
    return model


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(LINES):
            terminalreporter.write_line(LINES[number])
