from pathlib import Path

import numpy as np
import pytest

from d2c.config import TrainConfig
from d2c.trainer import load_dataset, split_dataset, train

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_config():
    return TrainConfig.from_file(CONFIGS / "tiny.cfg")


@pytest.fixture(scope="session")
def tiny_run(tiny_config):
    return train(tiny_config)


@pytest.fixture(scope="session")
def reference_config():
    return TrainConfig.from_file(CONFIGS / "reference.cfg")


@pytest.fixture(scope="session")
def reference_run(reference_config):
    """The full reference training run, shared by every test that needs it (a few minutes)."""
    result = train(reference_config)
    data = load_dataset(reference_config)
    train_set, held = split_dataset(data, reference_config.holdout)
    return result, train_set, held
