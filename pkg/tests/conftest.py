import numpy as np
import pytest
from hypothesis import settings

from a2log.corpus import generate_synthetic_corpus
from a2log.scorer import EncoderConfig, init_parameters

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def tiny_config():
    return EncoderConfig(u=4, d=8, ff_hidden=16, n_layers=1, n_heads=2, dropout=0.0, seed=3)


@pytest.fixture
def tiny_model(tiny_config):
    return init_parameters(tiny_config, 12), tiny_config


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(12, 3, 600, 0.1, seed=5, name="small")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
