"""Decision boundaries: augmentation-percentile (A2Log), 3-sigma and the label-aware Best oracle."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .scorer import EncoderConfig, ModelParameters, score_batch
from .tokenizer import CLS_ID, MASK, MASK_ID, PAD_ID, TokenSequence

METHODS = ("a2log", "three-sigma", "best-oracle")
BOUNDARY_HEADER = "a2log-boundary v1"


class BoundaryFormatError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationConfig:
    alpha: int = 1
    seed: int = 0
    rounds: int = 1

    def __post_init__(self):
        if self.alpha < 1:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")


@dataclass(frozen=True)
class BoundaryConfig:
    p: float = 0.95
    beta: float = 2.5

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"p must lie in (0, 1], got {self.p}")
        if not self.beta > 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")


@dataclass
class ScoreDistribution:
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if self.scores.size == 0:
            raise ValueError("a score distribution needs at least one score")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    @property
    def n(self) -> int:
        return int(self.scores.size)


@dataclass
class DecisionBoundary:
    epsilon: float
    method: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown boundary method {self.method!r}")
        if not math.isfinite(self.epsilon):
            raise ValueError("epsilon must be finite")

    def dumps(self) -> str:
        lines = [BOUNDARY_HEADER, f"method={self.method}", f"epsilon={self.epsilon!r}"]
        lines += [f"{k}={v}" for k, v in self.provenance.items()]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "DecisionBoundary":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != BOUNDARY_HEADER:
            raise BoundaryFormatError(f"expected header {BOUNDARY_HEADER!r}")
        fields = {}
        for ln in lines[1:]:
            key, sep, value = ln.partition("=")
            if not sep:
                raise BoundaryFormatError(f"bad boundary line {ln!r}")
            fields[key.strip()] = value.strip()
        try:
            method = fields.pop("method")
            epsilon = float(fields.pop("epsilon"))
        except KeyError as exc:
            raise BoundaryFormatError(f"missing field {exc}") from None
        return cls(epsilon, method, fields)

    @classmethod
    def load(cls, path: str | Path) -> "DecisionBoundary":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


# -- augmentation ------------------------------------------------------------

def augment_sequence(seq: TokenSequence, cfg: AugmentationConfig, rng=None) -> tuple[TokenSequence, bool]:
    """Replace ``min(alpha, maskable)`` random content tokens by ``[MASK]``.

    Returns the augmented sequence and a warning flag that is set when the
    sequence had nothing to mask (only ``[CLS]`` and padding).
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    positions = seq.maskable_positions
    if not positions:
        return seq, True
    k = min(cfg.alpha, len(positions))
    chosen = rng.choice(len(positions), size=k, replace=False)
    tokens = list(seq.tokens)
    for c in chosen:
        tokens[positions[c]] = MASK
    return TokenSequence(tuple(tokens), seq.origin_length), False


def augment_ids(ids: np.ndarray, alpha: int, seed: int, offset: int = 0) -> np.ndarray:
    """Vectorised counterpart of :func:`augment_sequence` on encoded rows.

    Row ``i`` uses the generator seeded by ``(seed, offset + i)``, so results
    do not depend on how rows are sharded.
    """
    out = np.array(ids, dtype=np.int64, copy=True)
    for i, row in enumerate(out):
        positions = np.flatnonzero((row != PAD_ID) & (row != CLS_ID))
        if positions.size == 0:
            continue
        rng = np.random.default_rng([seed, offset + i])
        k = min(alpha, positions.size)
        row[positions[rng.choice(positions.size, size=k, replace=False)]] = MASK_ID
    return out


def score_distribution(
    train_ids: np.ndarray,
    params: ModelParameters,
    config: EncoderConfig,
    aug_cfg: AugmentationConfig,
    stab_ids: np.ndarray | None = None,
) -> ScoreDistribution:
    """Eval-mode scores of one augmented variant per training row (per round).

    Passing rows that belong to the stabilization class (``stab_ids``)
    violates the precondition and raises.
    """
    train_ids = np.asarray(train_ids, dtype=np.int64)
    if len(train_ids) == 0:
        raise ValueError("score distribution of an empty training set")
    if stab_ids is not None and len(stab_ids):
        stab_rows = {r.tobytes() for r in np.asarray(stab_ids, dtype=np.int64)}
        if any(r.tobytes() in stab_rows for r in train_ids):
            raise ValueError("stabilization-class sequences must not enter the score distribution")
    rounds = [
        augment_ids(train_ids, aug_cfg.alpha, aug_cfg.seed, offset=r * len(train_ids))
        for r in range(aug_cfg.rounds)
    ]
    return ScoreDistribution(score_batch(np.concatenate(rounds), params, config))


# -- boundaries --------------------------------------------------------------

def nearest_rank(scores, p: float) -> float:
    """k-th smallest score with ``k = ceil(p * n)``."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    s = np.sort(np.asarray(scores, dtype=np.float64))
    k = max(1, math.ceil(p * s.size))
    return float(s[k - 1])


def a2log_boundary(dist: ScoreDistribution, cfg: BoundaryConfig, **provenance) -> DecisionBoundary:
    eps = nearest_rank(dist.scores, cfg.p) * cfg.beta
    prov = {"p": cfg.p, "beta": cfg.beta, "n": dist.n, **provenance}
    return DecisionBoundary(eps, "a2log", prov)


def three_sigma_boundary(train_scores: ScoreDistribution, **provenance) -> DecisionBoundary:
    """Mean plus three population standard deviations of un-augmented training scores.

    Mean and variance are computed exactly and rounded once (``statistics``
    works in rationals), so the result does not depend on score order.
    """
    s = train_scores.scores.tolist()
    mean = statistics.mean(s)
    eps = mean + 3.0 * math.sqrt(statistics.pvariance(s))
    return DecisionBoundary(eps, "three-sigma", {"n": train_scores.n, **provenance})


def decide(score, b: DecisionBoundary):
    """1 (anomaly) iff the score strictly exceeds epsilon."""
    if np.ndim(score) == 0:
        return int(score > b.epsilon)
    return (np.asarray(score) > b.epsilon).astype(np.int64)


def f1_at(scores: np.ndarray, labels: np.ndarray, eps: float) -> float:
    pred = scores > eps
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    return 0.0 if tp == 0 else 2.0 * tp / (2.0 * tp + fp + fn)


def best_oracle_boundary(test_scores: Sequence[tuple[float, int]], **provenance) -> tuple[DecisionBoundary, float]:
    """F1-maximal threshold over all midpoints of adjacent distinct scores.

    Candidates also include one value below the minimum and one above the
    maximum. Ties go to the largest epsilon. Runs in O(n log n) via a single
    sweep over the sorted scores.
    """
    pairs = np.asarray(list(test_scores), dtype=np.float64).reshape(-1, 2)
    scores, labels = pairs[:, 0], pairs[:, 1].astype(np.int64)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("best-oracle boundary needs at least one abnormal sample")
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], labels[order]
    distinct, first = np.unique(s, return_index=True)
    # positives/negatives strictly above each distinct value's group start
    pos_above_incl = n_pos - np.concatenate(([0], np.cumsum(y)))[first]
    neg_above_incl = (len(y) - n_pos) - np.concatenate(([0], np.cumsum(1 - y)))[first]
    # candidate c sits below distinct[c]; c == len(distinct) is above the max
    tp = np.append(pos_above_incl, 0)
    fp = np.append(neg_above_incl, 0)
    f1 = np.where(tp > 0, 2.0 * tp / np.maximum(2.0 * tp + fp + (n_pos - tp), 1), 0.0)
    thresholds = np.empty(len(distinct) + 1)
    thresholds[0] = distinct[0] - 1.0
    mid = (distinct[:-1] + distinct[1:]) / 2.0
    # adjacent floats: the rounded midpoint may land on the upper value
    thresholds[1:-1] = np.where(mid < distinct[1:], mid, distinct[:-1])
    thresholds[-1] = distinct[-1] + 1.0
    best = float(f1.max())
    idx = int(np.flatnonzero(f1 == best)[-1])
    return DecisionBoundary(float(thresholds[idx]), "best-oracle", {"n": len(y), **provenance}), best
