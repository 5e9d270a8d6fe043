import numpy as np
import pytest
import torch

from dualcond._torch import freeze
from dualcond.autoencoder import Autoencoder
from dualcond.classifier import Classifier
from dualcond.denoiser import Denoiser
from dualcond.pipeline import ModelBundle
from dualcond.schedule import build_schedule

TINY_IMAGE = (1, 16, 16)
TINY_T = 50


@pytest.fixture
def tiny_schedule():
    return build_schedule(TINY_T, 0.01, 0.2)


def make_tiny_denoiser(mode="dual", seed=0, T=TINY_T, beta_start=0.01, beta_end=0.2):
    torch.manual_seed(seed)
    return Denoiser((8, 2, 2), 5, (8, 8), 8, 8, 1, 8, T, mode, 1.0, beta_start, beta_end)


@pytest.fixture
def tiny_ae():
    torch.manual_seed(0)
    return freeze(Autoencoder(TINY_IMAGE, (4, 8, 8)))


@pytest.fixture
def tiny_cfr():
    torch.manual_seed(1)
    return freeze(Classifier(5, TINY_IMAGE, (8, 8, 8), 16))


@pytest.fixture
def tiny_den():
    return freeze(make_tiny_denoiser())


@pytest.fixture
def tiny_bundle(tiny_ae, tiny_cfr, tiny_den, tiny_schedule):
    return ModelBundle(tiny_ae, tiny_den, tiny_schedule, tiny_cfr, steps=5)


@pytest.fixture
def tiny_images():
    rng = np.random.default_rng(0)
    return rng.uniform(-1, 1, (6,) + TINY_IMAGE).astype(np.float32)
