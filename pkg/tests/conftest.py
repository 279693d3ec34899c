import numpy as np
import pytest

from rotkv import ModelConfig, random_weights, synthetic_calibration


@pytest.fixture
def toy_cfg():
    # l=2, n_h=2, d_h=8, d=16
    return ModelConfig.create(2, 2, 8)


@pytest.fixture
def toy_weights(toy_cfg):
    return random_weights(toy_cfg, 42)


@pytest.fixture
def toy_calib(toy_cfg):
    return synthetic_calibration(toy_cfg, 7, 2, 12)


@pytest.fixture
def tiny_cfg():
    # l=2, n_h=2, d_h=4, d=8
    return ModelConfig.create(2, 2, 4)


@pytest.fixture
def tiny_weights(tiny_cfg):
    return random_weights(tiny_cfg, 11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
