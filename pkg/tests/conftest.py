import numpy as np
import pytest
import torch

from nanosynth.config import LossConfig, ModelConfig, TrainingConfig
from nanosynth.data import SamplePair
from nanosynth.toy import make_toy_pairs, write_dataset

torch.set_num_threads(1)


def tiny_model_config(size=16, **kw):
    base = dict(image_size=(size, size), unet_depth=2, unet_width=4, latent_dim=8, style_dim=8, mapping_layers=2,
                disc_layers=2, disc_width=4)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def loss_config():
    return LossConfig()


@pytest.fixture
def training_config():
    return TrainingConfig(epochs=1, batch_size=2, seed=11, checkpoint_every=1)


@pytest.fixture(scope="session")
def toy_pairs():
    return make_toy_pairs(16, 16, seed=5, density=0.5)


@pytest.fixture
def toy_root(tmp_path):
    return write_dataset(make_toy_pairs(8, 16, seed=2, density=0.5), tmp_path / "toy")


def random_pair(rng, pid="p", shape=(16, 16)):
    return SamplePair(pid, rng.uniform(-1, 1, shape), (rng.random(shape) > 0.6).astype(np.float32))


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
