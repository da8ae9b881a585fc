"""Two-class training of the scorer: target normals (label 0) vs. stabilization class (label 1)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Iterator, Sequence

import numpy as np

from .corpus import LabeledDataset
from .scorer import EncoderConfig, ModelParameters, NonFiniteError, init_parameters, loss_and_gradients
from .tokenizer import TokenSequence, Vocabulary, encode_batch, prepare

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, step: int, detail: str = ""):
        self.epoch, self.step = epoch, step
        super().__init__(f"training diverged at epoch {epoch}, step {step}: {detail or 'non-finite loss'}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1024
    learning_rate: float = 1e-4
    weight_decay: float = 5e-5
    target_avg_loss: float = 0.01
    max_epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive and weight_decay non-negative")
        if self.target_avg_loss <= 0:
            raise ValueError("target_avg_loss must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    epochs_run: int = 0
    final_avg_loss: float = math.nan
    loss_curve: list[float] = field(default_factory=list)
    stop_reason: str = ""
    steps: int = 0


@dataclass
class StabilizationSet:
    sequences: list[TokenSequence]
    sources: list[str]
    per_source_count: int

    def __len__(self) -> int:
        return len(self.sequences)


def build_stabilization_set(
    external_corpora: Sequence[LabeledDataset],
    per_source: int,
    seed: int,
    u: int = 20,
    target_name: str | None = None,
) -> StabilizationSet:
    """Sample ``per_source`` normal messages uniformly without replacement from each corpus."""
    if per_source < 1:
        raise ValueError("the stabilization class needs at least one message per source")
    if not external_corpora:
        raise ValueError("at least one external corpus is required for stabilization")
    names = [ds.name for ds in external_corpora]
    if target_name is not None and target_name in names:
        raise ValueError(f"stabilization sources must differ from the target corpus {target_name!r}")
    rng = np.random.default_rng(seed)
    sequences: list[TokenSequence] = []
    for ds in external_corpora:
        normals = ds.normals()
        if len(normals) < per_source:
            raise ValueError(
                f"corpus {ds.name!r} has {len(normals)} normal records, {per_source} requested"
            )
        picked = np.sort(rng.choice(len(normals), size=per_source, replace=False))
        sequences.extend(prepare(normals[i].content, u) for i in picked)
    return StabilizationSet(sequences, names, per_source)


def weighted_epoch_stream(
    normal: np.ndarray, stab: np.ndarray, batch_size: int, seed
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Class-balanced batches for one epoch.

    Every slot picks a class with probability 1/2 and then an element of that
    class uniformly, with replacement. The epoch covers ``len(normal) +
    len(stab)`` draws, so the last batch may be short.
    """
    if len(normal) == 0 or len(stab) == 0:
        raise ValueError("both classes need at least one sequence")
    rng = np.random.default_rng(seed)
    total = len(normal) + len(stab)
    for start in range(0, total, batch_size):
        n = min(batch_size, total - start)
        labels = (rng.random(n) < 0.5).astype(np.int64)
        n_stab = int(labels.sum())
        ids = np.empty((n, normal.shape[1]), dtype=np.int64)
        ids[labels == 0] = normal[rng.integers(0, len(normal), n - n_stab)]
        ids[labels == 1] = stab[rng.integers(0, len(stab), n_stab)]
        yield ids, labels


class Adam:
    """Adam with decoupled weight decay applied directly to the weights."""

    def __init__(self, params: ModelParameters, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: ModelParameters, grads: ModelParameters) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _as_ids(seqs, vocab: Vocabulary, u: int) -> np.ndarray:
    if isinstance(seqs, StabilizationSet):
        seqs = seqs.sequences
    if isinstance(seqs, np.ndarray):
        return seqs
    return encode_batch(list(seqs), vocab, u)


def train(
    normal,
    stab,
    vocab: Vocabulary,
    enc_cfg: EncoderConfig,
    cfg: TrainConfig,
    params: ModelParameters | None = None,
) -> tuple[ModelParameters, TrainReport]:
    """Fit the scorer until the epoch-average loss reaches the target or epochs run out.

    ``normal`` and ``stab`` are framed sequences (or already-encoded id
    arrays). Initialization uses ``enc_cfg.seed``; batch sampling and dropout
    both derive from ``cfg.seed``.
    """
    normal_ids = _as_ids(normal, vocab, enc_cfg.u)
    stab_ids = _as_ids(stab, vocab, enc_cfg.u)
    if params is None:
        params = init_parameters(enc_cfg, len(vocab))
    sampler_seq, dropout_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    dropout_rng = np.random.default_rng(dropout_seq)
    opt = Adam(params, cfg.learning_rate, cfg.weight_decay)
    report = TrainReport()
    for epoch in range(cfg.max_epochs):
        total, count = 0.0, 0
        epoch_seed = sampler_seq.spawn(1)[0]
        for ids, labels in weighted_epoch_stream(normal_ids, stab_ids, cfg.batch_size, epoch_seed):
            try:
                loss, grads, _ = loss_and_gradients(ids, labels, params, enc_cfg, "train", dropout_rng)
            except NonFiniteError as exc:
                raise TrainingDivergedError(epoch, report.steps, str(exc)) from exc
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, report.steps)
            opt.step(params, grads)
            report.steps += 1
            total += loss * len(labels)
            count += len(labels)
        avg = total / count
        report.loss_curve.append(avg)
        report.epochs_run = epoch + 1
        report.final_avg_loss = avg
        log.info("epoch %d avg loss %.5f", epoch + 1, avg)
        if avg <= cfg.target_avg_loss:
            report.stop_reason = "loss-target"
            break
    else:
        report.stop_reason = "max-epochs"
    return params, report
