"""Transformer-encoder anomaly scorer with exact reverse-mode gradients.

The score of a token sequence is the Euclidean norm of the encoder output at
the ``[CLS]`` position. Everything runs in float64 numpy; ``backward`` is a
hand-derived reverse pass over the same computation as ``forward``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import erf

from .tokenizer import PAD_ID

LN_EPS = 1e-5
LOG_FLOOR = 1e-12

ModelParameters = dict  # name -> float64 ndarray, insertion order is canonical


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    u: int = 20
    d: int = 128
    ff_hidden: int = 256
    n_layers: int = 2
    n_heads: int = 4
    dropout: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.u < 2:
            raise ValueError(f"u must be >= 2, got {self.u}")
        if self.d < 2 or self.d % 2:
            raise ValueError(f"d must be even and >= 2, got {self.d}")
        if self.n_heads < 1 or self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1 or self.ff_hidden < 1:
            raise ValueError("n_layers and ff_hidden must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class ScoreOutput:
    z: np.ndarray
    score: np.ndarray


def layer_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, ff = config.d, config.ff_hidden
    return {
        "wq": (d, d), "bq": (d,),
        "wk": (d, d), "bk": (d,),
        "wv": (d, d), "bv": (d,),
        "wo": (d, d), "bo": (d,),
        "ln1_g": (d,), "ln1_b": (d,),
        "w1": (d, ff), "b1": (ff,),
        "w2": (ff, d), "b2": (d,),
        "ln2_g": (d,), "ln2_b": (d,),
    }


def parameter_shapes(config: EncoderConfig, vocab_size: int) -> dict[str, tuple[int, ...]]:
    shapes = {"embedding": (vocab_size, config.d)}
    for layer in range(config.n_layers):
        for name, shape in layer_shapes(config).items():
            shapes[f"layers.{layer}.{name}"] = shape
    return shapes


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_parameters(config: EncoderConfig, vocab_size: int) -> ModelParameters:
    """Xavier-uniform weights, zero biases/offsets, unit layer-norm gains."""
    if vocab_size < 5:
        raise ValueError(f"vocab_size must cover the 5 special tokens, got {vocab_size}")
    rng = np.random.default_rng(config.seed)
    params: ModelParameters = {}
    for name, shape in parameter_shapes(config, vocab_size).items():
        leaf = name.rsplit(".", 1)[-1]
        if len(shape) == 2:
            bound = xavier_bound(shape[0], shape[1])
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif leaf.endswith("_g"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def positional_encoding(u: int, d: int) -> np.ndarray:
    if d % 2:
        raise ValueError(f"positional encoding needs an even dimension, got {d}")
    pos = np.arange(u, dtype=np.float64)[:, None]
    freq = np.power(10000.0, np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((u, d))
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return pe


# -- primitives --------------------------------------------------------------

def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_back(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu(x):
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    return x * cdf, cdf


def _gelu_grad(x, cdf):
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _dropout_mask(rng, shape, rate):
    if rng is None or rate == 0.0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _check(x, where):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {where}")


def _mm(x, w):
    # (..., n) @ (n, m) through a single 2-D gemm
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(*x.shape[:-1], w.shape[1])


def _wgrad(x, dy):
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def _split_heads(x, h):
    b, n, d = x.shape
    return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


# -- encoder -----------------------------------------------------------------

def _encoder_layer(x, key_pad, p, config, n_query, rng):
    """One post-norm block; only the first ``n_query`` positions are updated."""
    h = config.n_heads
    scale = 1.0 / math.sqrt(config.head_dim)
    xq = x[:, :n_query]
    q = _split_heads(_mm(xq, p["wq"]) + p["bq"], h)
    k = _split_heads(_mm(x, p["wk"]) + p["bk"], h)
    v = _split_heads(_mm(x, p["wv"]) + p["bv"], h)
    s = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale
    s = np.where(key_pad[:, None, None, :], -np.inf, s)
    s = s - s.max(-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(-1, keepdims=True)
    c = _merge_heads(np.matmul(a, v))
    o = _mm(c, p["wo"]) + p["bo"]
    m1 = _dropout_mask(rng, o.shape, config.dropout)
    r1 = xq + (o if m1 is None else o * m1)
    y1, ln1 = _layer_norm(r1, p["ln1_g"], p["ln1_b"])
    hid = _mm(y1, p["w1"]) + p["b1"]
    act, cdf = _gelu(hid)
    f = _mm(act, p["w2"]) + p["b2"]
    m2 = _dropout_mask(rng, f.shape, config.dropout)
    r2 = y1 + (f if m2 is None else f * m2)
    y2, ln2 = _layer_norm(r2, p["ln2_g"], p["ln2_b"])
    cache = dict(x=x, xq=xq, q=q, k=k, v=v, a=a, c=c, m1=m1, ln1=ln1, y1=y1,
                 hid=hid, cdf=cdf, act=act, m2=m2, ln2=ln2)
    return y2, cache


def _encoder_layer_back(dy2, p, config, cache):
    h = config.n_heads
    scale = 1.0 / math.sqrt(config.head_dim)
    g = {}
    dr2, g["ln2_g"], g["ln2_b"] = _layer_norm_back(dy2, p["ln2_g"], cache["ln2"])
    df = dr2 if cache["m2"] is None else dr2 * cache["m2"]
    g["w2"] = _wgrad(cache["act"], df)
    g["b2"] = df.reshape(-1, df.shape[-1]).sum(0)
    dhid = _mm(df, p["w2"].T) * _gelu_grad(cache["hid"], cache["cdf"])
    g["w1"] = _wgrad(cache["y1"], dhid)
    g["b1"] = dhid.reshape(-1, dhid.shape[-1]).sum(0)
    dy1 = dr2 + _mm(dhid, p["w1"].T)
    dr1, g["ln1_g"], g["ln1_b"] = _layer_norm_back(dy1, p["ln1_g"], cache["ln1"])
    do = dr1 if cache["m1"] is None else dr1 * cache["m1"]
    g["wo"] = _wgrad(cache["c"], do)
    g["bo"] = do.reshape(-1, do.shape[-1]).sum(0)
    dc = _split_heads(_mm(do, p["wo"].T), h)
    a, q, k, v = cache["a"], cache["q"], cache["k"], cache["v"]
    da = np.matmul(dc, v.transpose(0, 1, 3, 2))
    dv = np.matmul(a.transpose(0, 1, 3, 2), dc)
    ds = a * (da - (da * a).sum(-1, keepdims=True)) * scale
    dq = _merge_heads(np.matmul(ds, k))
    dk = _merge_heads(np.matmul(ds.transpose(0, 1, 3, 2), q))
    dv = _merge_heads(dv)
    x, xq = cache["x"], cache["xq"]
    g["wq"], g["bq"] = _wgrad(xq, dq), dq.reshape(-1, dq.shape[-1]).sum(0)
    g["wk"], g["bk"] = _wgrad(x, dk), dk.reshape(-1, dk.shape[-1]).sum(0)
    g["wv"], g["bv"] = _wgrad(x, dv), dv.reshape(-1, dv.shape[-1]).sum(0)
    dx = _mm(dk, p["wk"].T) + _mm(dv, p["wv"].T)
    dx[:, : xq.shape[1]] += dr1 + _mm(dq, p["wq"].T)
    return dx, g


def _layer_params(params, layer):
    prefix = f"layers.{layer}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def _validate_ids(ids, params, config):
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] != config.u:
        raise ValueError(f"expected token ids of shape (batch, {config.u}), got {ids.shape}")
    vocab_size = params["embedding"].shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ValueError(f"token id out of range [0, {vocab_size})")
    return ids.astype(np.int64, copy=False)


def _forward(ids, params, config, rng=None):
    pe = positional_encoding(config.u, config.d)
    x = params["embedding"][ids] + pe
    m0 = _dropout_mask(rng, x.shape, config.dropout)
    if m0 is not None:
        x = x * m0
    key_pad = ids == PAD_ID
    caches = []
    for layer in range(config.n_layers):
        n_query = 1 if layer == config.n_layers - 1 else config.u
        x, cache = _encoder_layer(x, key_pad, _layer_params(params, layer), config, n_query, rng)
        _check(x, f"encoder layer {layer}")
        caches.append(cache)
    return x[:, 0], (ids, m0, caches)


def forward_score(ids, params: ModelParameters, config: EncoderConfig, mode: str = "eval",
                  rng: np.random.Generator | None = None) -> ScoreOutput:
    """Score one sequence (1-D ids) or a batch (2-D ids).

    In ``"train"`` mode dropout masks are drawn from ``rng``; ``"eval"`` is
    deterministic and ignores ``rng``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    single = np.ndim(ids) == 1
    ids = _validate_ids(ids, params, config)
    if mode == "train" and rng is None:
        rng = np.random.default_rng(config.seed)
    z, _ = _forward(ids, params, config, rng if mode == "train" else None)
    score = np.sqrt((z * z).sum(-1))
    if single:
        return ScoreOutput(z[0], score[0])
    return ScoreOutput(z, score)


def attention_maps(ids, params: ModelParameters, config: EncoderConfig) -> list[np.ndarray]:
    """Eval-mode attention probabilities per layer, shape (batch, heads, queries, keys)."""
    ids = _validate_ids(ids, params, config)
    _, (_, _, caches) = _forward(ids, params, config)
    return [c["a"] for c in caches]


def score_batch(ids, params: ModelParameters, config: EncoderConfig, batch_size: int = 4096) -> np.ndarray:
    """Eval-mode scores for many sequences.

    Duplicate rows are scored once; unique rows are processed in sorted
    order, so the output does not depend on how the input is ordered.
    """
    ids = _validate_ids(ids, params, config)
    if len(ids) == 0:
        return np.zeros(0)
    uniq, inverse = np.unique(ids, axis=0, return_inverse=True)
    out = np.empty(len(uniq))
    for start in range(0, len(uniq), batch_size):
        z, _ = _forward(uniq[start:start + batch_size], params, config)
        out[start:start + batch_size] = np.sqrt((z * z).sum(-1))
    return out[inverse.reshape(-1)]


# -- objective ---------------------------------------------------------------

def _per_sample_loss(sq, y):
    return (1.0 - y) * sq - y * np.log(np.maximum(-np.expm1(-sq), LOG_FLOOR))


def hyperspherical_loss(scores, labels) -> float:
    """Mean of ``(1-y)*s^2 - y*log(1-exp(-s^2))`` over the batch."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in shape")
    if s.size == 0:
        raise ValueError("loss of an empty batch is undefined")
    return float(_per_sample_loss(s * s, y).mean())


def loss_and_gradients(ids, labels, params: ModelParameters, config: EncoderConfig,
                       mode: str = "eval", rng: np.random.Generator | None = None):
    """Return ``(loss, grads, scores)`` for the batch mean hyperspherical loss."""
    ids = _validate_ids(ids, params, config)
    y = np.asarray(labels, dtype=np.float64)
    if len(y) != len(ids) or len(y) == 0:
        raise ValueError("labels must be non-empty and match the batch size")
    z, (ids, m0, caches) = _forward(ids, params, config, rng if mode == "train" else None)
    sq = (z * z).sum(-1)
    loss = float(_per_sample_loss(sq, y).mean())
    _check(np.asarray(loss), "loss")

    # d/dsq of -log(1 - exp(-sq)) is -1/expm1(sq); zero where the floor is active
    floored = -np.expm1(-sq) <= LOG_FLOOR
    with np.errstate(divide="ignore"):
        push = np.where(floored, 0.0, -1.0 / np.expm1(sq))
    dsq = (1.0 - y) + y * push
    dz = (2.0 / len(y)) * dsq[:, None] * z

    grads: ModelParameters = {}
    dx = dz[:, None, :]
    for layer in reversed(range(config.n_layers)):
        dx, g = _encoder_layer_back(dx, _layer_params(params, layer), config, caches[layer])
        _check(dx, f"gradient of encoder layer {layer}")
        for name, value in g.items():
            grads[f"layers.{layer}.{name}"] = value
    if m0 is not None:
        dx = dx * m0
    d_emb = np.zeros_like(params["embedding"])
    np.add.at(d_emb, ids.reshape(-1), dx.reshape(-1, config.d))
    grads["embedding"] = d_emb
    ordered = {name: grads[name] for name in params}
    return loss, ordered, np.sqrt(sq)


def backward(ids, labels, params: ModelParameters, config: EncoderConfig,
             mode: str = "eval", rng: np.random.Generator | None = None) -> ModelParameters:
    return loss_and_gradients(ids, labels, params, config, mode, rng)[1]
