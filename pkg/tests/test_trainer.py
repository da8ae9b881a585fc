import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from a2log.corpus import generate_synthetic_corpus
from a2log.scorer import EncoderConfig, init_parameters, score_batch
from a2log.tokenizer import build_vocabulary, encode_batch, prepare
from a2log.trainer import (
    Adam, TrainConfig, TrainingDivergedError, build_stabilization_set, train, weighted_epoch_stream,
)


def test_stabilization_totals():
    # two external sources at 60000 messages each, three for the Spirit row
    assert 2 * 60000 == 120000 and 3 * 60000 == 180000
    ext = [generate_synthetic_corpus(10, 0, 400, 0.0, seed=s, name=f"e{s}") for s in (1, 2, 3)]
    stab = build_stabilization_set(ext, 300, seed=0, u=8)
    assert len(stab) == 900 and stab.sources == ["e1", "e2", "e3"]


def test_stabilization_errors():
    ext = [generate_synthetic_corpus(10, 2, 200, 0.2, seed=1, name="e")]
    with pytest.raises(ValueError):
        build_stabilization_set(ext, 0, 0)
    with pytest.raises(ValueError):
        build_stabilization_set(ext, 10_000, 0)
    with pytest.raises(ValueError):
        build_stabilization_set([], 10, 0)
    with pytest.raises(ValueError):
        build_stabilization_set(ext, 10, 0, target_name="e")
    # only normal records are sampled
    stab = build_stabilization_set(ext, ext[0].n_normal, 0, u=30)
    normals = {prepare(r.content, 30) for r in ext[0].normals()}
    assert set(stab.sequences) <= normals


def test_stabilization_deterministic():
    ext = [generate_synthetic_corpus(10, 0, 300, 0.0, seed=4, name="e")]
    a = build_stabilization_set(ext, 50, seed=3)
    b = build_stabilization_set(ext, 50, seed=3)
    assert a.sequences == b.sequences


@given(st.integers(1, 40), st.integers(1, 300), st.integers(1, 64), st.integers(0, 2**31))
def test_weighted_stream(n_norm, n_stab, batch, seed):
    normal = np.zeros((n_norm, 3), dtype=np.int64)
    stab = np.ones((n_stab, 3), dtype=np.int64)
    batches = list(weighted_epoch_stream(normal, stab, batch, seed))
    assert len(batches) == math.ceil((n_norm + n_stab) / batch)
    assert sum(len(y) for _, y in batches) == n_norm + n_stab
    for ids, y in batches:
        assert np.array_equal(ids[:, 0], y)  # stab rows are all ones, normals all zeros


def test_weighted_stream_balance():
    normal = np.zeros((10, 2), dtype=np.int64)
    stab = np.ones((10_000, 2), dtype=np.int64)
    y = np.concatenate([y for _, y in weighted_epoch_stream(normal, stab, 512, 0)])
    assert abs(y.mean() - 0.5) < 0.02
    with pytest.raises(ValueError):
        next(weighted_epoch_stream(normal[:0], stab, 4, 0))


def test_adam_first_step_and_decay():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam(p, lr=0.1, weight_decay=0.5)
    opt.step(p, {"w": np.array([3.0, -0.5])})
    # first bias-corrected step has magnitude lr, after decoupled decay p *= 1 - lr*wd
    assert np.allclose(p["w"], [1.0 * 0.95 - 0.1, -2.0 * 0.95 + 0.1], atol=1e-7)


@pytest.mark.parametrize("kwargs", [dict(max_epochs=0), dict(batch_size=0), dict(learning_rate=0.0),
                                    dict(target_avg_loss=0.0)])
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


@pytest.fixture(scope="module")
def toy_problem():
    u = 10
    tgt = generate_synthetic_corpus(8, 0, 300, 0.0, seed=11, name="t")
    ext = generate_synthetic_corpus(8, 0, 300, 0.0, seed=12, name="x")
    norm = [prepare(c, u) for c in tgt.contents]
    stab = [prepare(c, u) for c in ext.contents]
    vocab = build_vocabulary(norm + stab)
    cfg = EncoderConfig(u=u, d=16, ff_hidden=32, n_layers=1, n_heads=2, dropout=0.05, seed=0)
    return encode_batch(norm, vocab, u), encode_batch(stab, vocab, u), vocab, cfg


def test_training_separates_classes(toy_problem):
    norm, stab, vocab, cfg = toy_problem
    before = init_parameters(cfg, len(vocab))
    params, report = train(norm, stab, vocab, cfg,
                           TrainConfig(batch_size=32, learning_rate=3e-3, target_avg_loss=0.05,
                                       max_epochs=40, seed=1))
    assert report.stop_reason == "loss-target"
    assert report.final_avg_loss <= 0.05 and report.loss_curve[-1] == report.final_avg_loss
    assert report.loss_curve[0] > report.final_avg_loss
    assert report.steps == report.epochs_run * math.ceil((len(norm) + len(stab)) / 32)
    s_norm, s_stab = score_batch(norm, params, cfg), score_batch(stab, params, cfg)
    assert s_norm.mean() < s_stab.mean()
    assert not np.array_equal(before["embedding"], params["embedding"])


def test_training_is_reproducible(toy_problem):
    norm, stab, vocab, cfg = toy_problem
    tcfg = TrainConfig(batch_size=64, learning_rate=1e-3, max_epochs=2, seed=5)
    a, ra = train(norm, stab, vocab, cfg, tcfg)
    b, rb = train(norm, stab, vocab, cfg, tcfg)
    assert ra == rb and ra.stop_reason == "max-epochs"
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_divergence_is_reported(toy_problem):
    norm, stab, vocab, cfg = toy_problem
    params = init_parameters(cfg, len(vocab))
    params["layers.0.w2"][0, 0] = np.nan
    with pytest.raises(TrainingDivergedError) as info, np.errstate(all="ignore"):
        train(norm, stab, vocab, cfg, TrainConfig(batch_size=64, max_epochs=1), params=params)
    assert info.value.epoch == 0 and info.value.step == 0


def test_weighted_stream_chi_square():
    from scipy.stats import chisquare
    normal = np.zeros((1000, 2), dtype=np.int64)
    stab = np.ones((100, 2), dtype=np.int64)
    y = np.concatenate([y for s in range(20) for _, y in weighted_epoch_stream(normal, stab, 1024, s)])
    counts = np.bincount(y, minlength=2)
    assert chisquare(counts).pvalue > 0.01
    assert len(list(weighted_epoch_stream(np.zeros((1024, 2)), np.ones((1024, 2)), 1024, 0))) == 2
    a = [ids for ids, _ in weighted_epoch_stream(normal, stab, 64, 7)]
    b = [ids for ids, _ in weighted_epoch_stream(normal, stab, 64, 7)]
    assert all(np.array_equal(x, z) for x, z in zip(a, b))
