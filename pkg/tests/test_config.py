import pytest
from hypothesis import given, strategies as st

from a2log.config import (
    EXPERIMENT_KEYS, ConfigError, RunConfig, derive_seed, dumps_kv, parse_kv, validate_methods,
)


def test_parse_and_defaults():
    values = parse_kv("# comment\nd=32  # inline\nlearning_rate=1e-3\n\nseed=7\n")
    assert values == {"d": 32, "learning_rate": 1e-3, "seed": 7}
    run = RunConfig.from_mapping(values)
    assert run.encoder.d == 32 and run.encoder.ff_hidden == 256
    assert run.training.learning_rate == 1e-3 and run.training.batch_size == 1024
    assert run.boundary.p == 0.95 and run.augmentation.alpha == 1


def test_full_scale_defaults():
    run = RunConfig.from_mapping({})
    enc, tr = run.encoder, run.training
    assert (enc.u, enc.d, enc.ff_hidden, enc.n_layers, enc.n_heads, enc.dropout) == (20, 128, 256, 2, 4, 0.05)
    assert (tr.batch_size, tr.learning_rate, tr.weight_decay, tr.target_avg_loss) == (1024, 1e-4, 5e-5, 0.01)
    assert run.stab_per_source == 60000


@pytest.mark.parametrize("text", ["d", "colour=red", "d=1\nd=2", "d=abc", "p=1.5", "n_heads=3"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        RunConfig.from_mapping(parse_kv(text))


def test_master_seed_fans_out():
    a, b = RunConfig.from_mapping({"seed": 1}), RunConfig.from_mapping({"seed": 2})
    seeds = {a.encoder.seed, a.training.seed, a.augmentation.seed}
    assert len(seeds) == 3
    assert a.encoder.seed != b.encoder.seed
    assert RunConfig.from_mapping({"seed": 1}) == a


@given(st.integers(0, 2**32 - 1), st.lists(st.integers(0, 1000), max_size=4))
def test_derive_seed_is_stable(master, path):
    s = derive_seed(master, *path)
    assert s == derive_seed(master, *path) and 0 <= s < 2**32


def test_experiment_keys_roundtrip():
    values = {"splits": [0.1, 0.2], "stab": ["a.log", "b.log"], "methods": ["a2log"], "d": 16}
    assert parse_kv(dumps_kv(values), EXPERIMENT_KEYS) == values
    assert RunConfig.from_mapping(parse_kv(dumps_kv(RunConfig().as_mapping()))).as_mapping() \
        == RunConfig().as_mapping()
    with pytest.raises(ConfigError):
        validate_methods(["a2log", "median"])
