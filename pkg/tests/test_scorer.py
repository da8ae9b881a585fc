import math
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from a2log.scorer import (
    EncoderConfig, NonFiniteError, attention_maps, forward_score, hyperspherical_loss,
    init_parameters, loss_and_gradients, parameter_shapes, positional_encoding, score_batch,
)
from a2log.tokenizer import CLS_ID, PAD_ID


def _ids(rng, n, u, vocab, pad_tail=True):
    ids = rng.integers(3, vocab, size=(n, u))
    ids[:, 0] = CLS_ID
    if pad_tail:
        for row in ids:
            row[rng.integers(1, u + 1):] = PAD_ID
    return ids


# -- loss ----------------------------------------------------------------------

def test_loss_closed_forms():
    assert abs(hyperspherical_loss([2.0], [0]) - 4.0) <= 1e-9
    assert abs(hyperspherical_loss([math.sqrt(math.log(2))], [1]) - math.log(2)) <= 1e-9


@given(st.lists(st.tuples(st.floats(0.0, 30.0), st.integers(0, 1)), min_size=1, max_size=50))
def test_loss_nonnegative_and_finite(pairs):
    s, y = zip(*pairs)
    loss = hyperspherical_loss(s, y)
    assert math.isfinite(loss) and loss >= 0.0


def test_loss_floor_at_zero_score():
    # a stabilization message at the center is penalized but stays finite
    assert hyperspherical_loss([0.0], [1]) == pytest.approx(-math.log(1e-12))
    with pytest.raises(ValueError):
        hyperspherical_loss([], [])
    with pytest.raises(ValueError):
        hyperspherical_loss([1.0, 2.0], [0])


# -- gradients -----------------------------------------------------------------

def _fd_check(params, ids, y, cfg, h=1e-5, mode="eval", seed=None):
    rng = (lambda: np.random.default_rng(seed)) if seed is not None else (lambda: None)
    _, grads, _ = loss_and_gradients(ids, y, params, cfg, mode, rng())
    errors = {}
    for name, p in params.items():
        num = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            lp = loss_and_gradients(ids, y, params, cfg, mode, rng())[0]
            p[i] = old - h
            lm = loss_and_gradients(ids, y, params, cfg, mode, rng())[0]
            p[i] = old
            num[i] = (lp - lm) / (2 * h)
        # norm-wise relative error; the floor keeps identically-zero gradients well defined
        denom = max(np.linalg.norm(num) + np.linalg.norm(grads[name]), 1e-6)
        errors[name] = float(np.linalg.norm(num - grads[name]) / denom)
    return errors, grads


def _perturbed_tiny(seed=0):
    cfg = EncoderConfig(u=4, d=8, ff_hidden=16, n_layers=1, n_heads=2, dropout=0.0, seed=3)
    params = init_parameters(cfg, 12)
    rng = np.random.default_rng(seed)
    for k in params:  # move biases and gains away from their init values
        params[k] = params[k] + 0.1 * rng.standard_normal(params[k].shape)
    ids = _ids(rng, 6, 4, 12)
    ids[1, 1:] = PAD_ID
    y = np.array([0, 1, 0, 1, 1, 0], dtype=float)
    return cfg, params, ids, y


def test_gradient_check_tiny_model():
    cfg, params, ids, y = _perturbed_tiny()
    t0 = time.perf_counter()
    errors, grads = _fd_check(params, ids, y, cfg)
    assert time.perf_counter() - t0 < 30
    bad = {k: e for k, e in errors.items() if e > 1e-4}
    assert not bad, bad
    # softmax is invariant to a per-query shift, so the key bias gradient is zero up to rounding
    assert np.abs(grads["layers.0.bk"]).max() < 1e-15
    assert np.all(grads["embedding"][PAD_ID] == 0.0)


def test_gradient_check_two_layers_with_dropout():
    cfg = EncoderConfig(u=5, d=8, ff_hidden=12, n_layers=2, n_heads=2, dropout=0.2, seed=1)
    params = init_parameters(cfg, 10)
    rng = np.random.default_rng(7)
    ids = _ids(rng, 4, 5, 10)
    y = np.array([0, 1, 1, 0], dtype=float)
    # the same seed for every evaluation freezes the dropout masks
    errors, _ = _fd_check(params, ids, y, cfg, mode="train", seed=11)
    assert max(errors.values()) <= 1e-4, errors


# -- forward -------------------------------------------------------------------

def test_parameter_shapes_and_init(tiny_model):
    params, cfg = tiny_model
    assert {k: v.shape for k, v in params.items()} == parameter_shapes(cfg, 12)
    assert np.all(params["layers.0.ln1_g"] == 1.0) and np.all(params["layers.0.bq"] == 0.0)
    with pytest.raises(ValueError):
        init_parameters(cfg, 4)


@pytest.mark.parametrize("kwargs", [dict(d=7), dict(d=8, n_heads=3), dict(u=1), dict(dropout=1.0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        EncoderConfig(**kwargs)


def test_positional_encoding():
    pe = positional_encoding(20, 16)
    assert pe.shape == (20, 16)
    assert np.allclose(pe[0, 0::2], 0.0) and np.allclose(pe[0, 1::2], 1.0)
    with pytest.raises(ValueError):
        positional_encoding(4, 5)


@given(st.integers(0, 2**31 - 1))
def test_padding_is_invisible(seed):
    cfg = EncoderConfig(u=6, d=8, ff_hidden=16, n_layers=2, n_heads=2, dropout=0.0, seed=2)
    params = init_parameters(cfg, 15)
    rng = np.random.default_rng(seed)
    ids = _ids(rng, 1, 6, 15)[0]
    ids[3:] = PAD_ID
    base = forward_score(ids, params, cfg).score
    # changing the PAD embedding must not change any score
    params["embedding"][PAD_ID] += rng.standard_normal(cfg.d)
    assert forward_score(ids, params, cfg).score == pytest.approx(base, rel=1e-12, abs=1e-12)
    maps = attention_maps(ids, params, cfg)
    assert np.all(maps[0][0, :, :, 3:] == 0.0)
    assert np.allclose(maps[-1].sum(-1), 1.0)


def test_score_is_norm_and_eval_deterministic(tiny_model, rng):
    params, cfg = tiny_model
    ids = _ids(rng, 9, 4, 12)
    out = forward_score(ids, params, cfg)
    assert np.allclose(out.score, np.linalg.norm(out.z, axis=1))
    assert np.all(out.score >= 0)
    again = forward_score(ids, params, cfg, rng=np.random.default_rng(5))
    assert np.array_equal(out.score, again.score)
    single = forward_score(ids[0], params, cfg)
    assert single.z.shape == (cfg.d,)


def test_train_mode_uses_dropout(rng):
    cfg = EncoderConfig(u=6, d=16, ff_hidden=16, n_layers=2, n_heads=2, dropout=0.3, seed=0)
    params = init_parameters(cfg, 20)
    ids = _ids(rng, 5, 6, 20)
    ev = forward_score(ids, params, cfg).score
    tr = forward_score(ids, params, cfg, "train", np.random.default_rng(1)).score
    assert not np.array_equal(ev, tr)
    with pytest.raises(ValueError):
        forward_score(ids, params, cfg, mode="fit")


@given(st.permutations(list(range(12))))
def test_score_batch_order_independent(perm):
    cfg = EncoderConfig(u=5, d=8, ff_hidden=8, n_layers=1, n_heads=2, dropout=0.0)
    params = init_parameters(cfg, 9)
    ids = _ids(np.random.default_rng(3), 12, 5, 9)
    ids[5] = ids[2]
    base = score_batch(ids, params, cfg)
    perm = np.asarray(perm)
    assert np.array_equal(score_batch(ids[perm], params, cfg), base[perm])
    assert base[5] == base[2]


def test_input_validation(tiny_model):
    params, cfg = tiny_model
    with pytest.raises(ValueError):
        score_batch(np.ones((2, 5), dtype=int), params, cfg)
    with pytest.raises(ValueError):
        score_batch(np.full((2, 4), 12), params, cfg)
    assert score_batch(np.zeros((0, 4), dtype=int), params, cfg).shape == (0,)


def test_non_finite_names_layer(tiny_model):
    params, cfg = tiny_model
    params = {k: v.copy() for k, v in params.items()}
    params["layers.0.w1"][0, 0] = np.inf
    with pytest.raises(NonFiniteError, match="layer 0"), np.errstate(invalid="ignore"):
        score_batch(np.array([[1, 5, 6, 0]]), params, cfg)


def test_xavier_init():
    from a2log.scorer import xavier_bound
    assert xavier_bound(4, 8) == pytest.approx(math.sqrt(0.5))
    cfg = EncoderConfig(d=128, ff_hidden=256, seed=5)
    a, b = init_parameters(cfg, 50), init_parameters(cfg, 50)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    for name in ("layers.0.wq", "layers.1.w1", "layers.0.w2"):
        w = a[name]
        assert w.size >= 10_000
        expected = 2.0 / (w.shape[0] + w.shape[1])
        assert abs(w.var() / expected - 1.0) < 0.10
        assert np.abs(w).max() <= xavier_bound(*w.shape)


def test_positional_encoding_value():
    assert positional_encoding(4, 8)[1, 0] == pytest.approx(math.sin(1.0))


def test_all_padding_input_is_finite(tiny_model):
    params, cfg = tiny_model
    out = forward_score(np.array([CLS_ID, PAD_ID, PAD_ID, PAD_ID]), params, cfg)
    assert np.isfinite(out.score) and np.all(np.isfinite(out.z))


def test_batch_loss_mean():
    assert hyperspherical_loss([2.0, math.sqrt(math.log(2))], [0, 1]) == pytest.approx(
        (4 + math.log(2)) / 2, abs=1e-12)


@given(st.floats(0.01, 5.0), st.floats(0.01, 5.0))
def test_stab_loss_decreasing_in_score(a, b):
    if a == b:
        return
    lo, hi = sorted((a, b))
    l_hi, l_lo = hyperspherical_loss([hi], [1]), hyperspherical_loss([lo], [1])
    assert l_hi <= l_lo
    if hi > lo * (1 + 1e-9):  # strict once the scores differ by more than rounding
        assert l_hi < l_lo


def test_duplicated_batch_same_gradients(tiny_model, rng):
    params, cfg = tiny_model
    ids = _ids(rng, 5, 4, 12)
    y = np.array([0, 1, 0, 1, 0])
    l1, g1, _ = loss_and_gradients(ids, y, params, cfg)
    l2, g2, _ = loss_and_gradients(np.concatenate([ids, ids]), np.concatenate([y, y]), params, cfg)
    assert l1 == pytest.approx(l2, rel=1e-13)
    assert all(np.allclose(g1[k], g2[k], rtol=1e-11, atol=1e-15) for k in g1)
