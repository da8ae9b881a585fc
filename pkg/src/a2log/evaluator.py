"""Scoring test sets, precision/recall/F1, and the split-protocol experiment driver."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field, asdict, replace
from typing import Sequence

import numpy as np

from .boundary import (
    METHODS,
    AugmentationConfig,
    BoundaryConfig,
    DecisionBoundary,
    ScoreDistribution,
    a2log_boundary,
    best_oracle_boundary,
    decide,
    score_distribution,
    three_sigma_boundary,
)
from .config import derive_seed
from .corpus import LabeledDataset, SplitSpec, chronological_split
from .scorer import EncoderConfig, ModelParameters, score_batch
from .tokenizer import Vocabulary, build_vocabulary, encode_batch, prepare
from .trainer import TrainConfig, build_stabilization_set, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    counts: ConfusionCounts
    boundary: DecisionBoundary | None = None
    split: SplitSpec | None = None


def confusion_and_metrics(pairs: Sequence[tuple[int, int]]) -> MetricsReport:
    """Anomalies are the positive class; zero denominators yield 0."""
    arr = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
    if len(arr) == 0:
        raise ValueError("metrics of an empty prediction set are undefined")
    y, pred = arr[:, 0] == 1, arr[:, 1] == 1
    counts = ConfusionCounts(
        tp=int(np.sum(y & pred)), fp=int(np.sum(~y & pred)),
        tn=int(np.sum(~y & ~pred)), fn=int(np.sum(y & ~pred)),
    )
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MetricsReport(precision, recall, f1, counts)


def encode_dataset(ds: LabeledDataset, vocab: Vocabulary, u: int) -> np.ndarray:
    return encode_batch([prepare(c, u) for c in ds.contents], vocab, u)


def classify_dataset(
    test: LabeledDataset,
    params: ModelParameters,
    vocab: Vocabulary,
    config: EncoderConfig,
    b: DecisionBoundary,
) -> list[tuple[int, int, float]]:
    if len(test) == 0:
        return []
    scores = score_batch(encode_dataset(test, vocab, config.u), params, config)
    preds = decide(scores, b)
    return [(lab, int(p), float(s)) for lab, p, s in zip(test.labels, preds, scores)]


# -- experiments -------------------------------------------------------------

@dataclass
class ExperimentSpec:
    target: LabeledDataset
    external: list[LabeledDataset]
    splits: tuple[float, ...] = (0.1, 0.2, 0.4, 0.6)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    boundary: BoundaryConfig = field(default_factory=BoundaryConfig)
    methods: tuple[str, ...] = METHODS
    repetitions: int = 3
    stab_per_source: int = 60000
    seed: int = 0

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")


@dataclass
class Cell:
    split: float
    method: str
    repetition: int
    status: str = "ok"
    epsilon: float = math.nan
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    precision: float = math.nan
    recall: float = math.nan
    f1: float = math.nan
    init_seed: int = 0
    sample_seed: int = 0
    augment_seed: int = 0
    epochs: int = 0
    stop_reason: str = ""
    final_avg_loss: float = math.nan
    mean_train_score: float = math.nan
    mean_augmented_score: float = math.nan
    error: str = ""
    train_seconds: float = 0.0
    eval_seconds: float = 0.0


TABLE_COLUMNS = [f for f in Cell.__dataclass_fields__ if not f.endswith("_seconds")]


@dataclass
class ExperimentResult:
    cells: list[Cell]
    master_seed: int

    def best(self) -> dict[tuple[float, str], Cell]:
        """Best repetition per (split, method), by F1."""
        out: dict[tuple[float, str], Cell] = {}
        for c in self.cells:
            if c.status != "ok":
                continue
            key = (c.split, c.method)
            if key not in out or c.f1 > out[key].f1:
                out[key] = c
        return out

    def summary_rows(self) -> list[dict]:
        rows = []
        best = self.best()
        keys = sorted({(c.split, c.method) for c in self.cells},
                      key=lambda k: (k[0], METHODS.index(k[1])))
        for key in keys:
            f1s = [c.f1 for c in self.cells if (c.split, c.method) == key and c.status == "ok"]
            b = best.get(key)
            rows.append({
                "split": key[0], "method": key[1],
                "best_f1": b.f1 if b else math.nan,
                "best_repetition": b.repetition if b else -1,
                "precision": b.precision if b else math.nan,
                "recall": b.recall if b else math.nan,
                "epsilon": b.epsilon if b else math.nan,
                "mean_f1": statistics.fmean(f1s) if f1s else math.nan,
                "std_f1": statistics.pstdev(f1s) if f1s else math.nan,
                "n_ok": len(f1s),
            })
        return rows

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for c in self.cells:
            w.writerow([_fmt(getattr(c, k)) for k in TABLE_COLUMNS])
        return buf.getvalue()

    def summary_csv(self) -> str:
        rows = self.summary_rows()
        buf = io.StringIO()
        if rows:
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(list(rows[0]))
            for r in rows:
                w.writerow([_fmt(v) for v in r.values()])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "master_seed": self.master_seed,
            "cells": [asdict(c) for c in self.cells],
            "summary": self.summary_rows(),
        }
        return json.dumps(doc, indent=2, allow_nan=True)


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _evaluate_methods(spec, cell_base, train_ids, test_ds, test_ids, params, vocab):
    """All boundary methods of one (split, repetition) on one shared score vector."""
    cfg = spec.encoder
    test_scores = score_batch(test_ids, params, cfg) if len(test_ids) else np.zeros(0)
    train_scores = score_batch(train_ids, params, cfg)
    aug = replace(spec.augmentation, seed=cell_base.augment_seed)
    dist = score_distribution(train_ids, params, cfg, aug)
    labels = np.asarray(test_ds.labels, dtype=np.int64)
    cells = []
    for method in spec.methods:
        cell = replace(cell_base, method=method)
        t0 = time.perf_counter()
        try:
            if method == "a2log":
                b = a2log_boundary(dist, spec.boundary, alpha=aug.alpha, seed=aug.seed)
            elif method == "three-sigma":
                b = three_sigma_boundary(ScoreDistribution(train_scores))
            else:
                b, _ = best_oracle_boundary(zip(test_scores, labels))
            m = confusion_and_metrics(zip(labels, decide(test_scores, b)))
            cell.epsilon = b.epsilon
            cell.tp, cell.fp, cell.tn, cell.fn = m.counts.tp, m.counts.fp, m.counts.tn, m.counts.fn
            cell.precision, cell.recall, cell.f1 = m.precision, m.recall, m.f1
        except Exception as exc:  # one failed cell must not abort the run
            cell.status, cell.error = "failed", f"{type(exc).__name__}: {exc}"
        cell.mean_train_score = float(np.mean(train_scores))
        cell.mean_augmented_score = float(np.mean(dist.scores))
        cell.eval_seconds = time.perf_counter() - t0
        cells.append(cell)
    return cells


def run_experiment(spec: ExperimentSpec, progress=None) -> ExperimentResult:
    """Train once per (split, repetition) and evaluate every requested boundary on shared scores."""
    cells: list[Cell] = []
    u = spec.encoder.u
    for si, fraction in enumerate(spec.splits):
        for rep in range(spec.repetitions):
            base = Cell(
                split=fraction, method="", repetition=rep,
                init_seed=derive_seed(spec.seed, si, rep, 0),
                sample_seed=derive_seed(spec.seed, si, rep, 1),
                augment_seed=derive_seed(spec.seed, si, rep, 2),
            )
            t0 = time.perf_counter()
            try:
                train_ds, test_ds = chronological_split(spec.target, SplitSpec(fraction, base.sample_seed))
                stab = build_stabilization_set(
                    spec.external, spec.stab_per_source, base.sample_seed, u, spec.target.name
                )
                train_seqs = [prepare(c, u) for c in train_ds.contents]
                vocab = build_vocabulary(train_seqs + stab.sequences)
                train_ids = encode_batch(train_seqs, vocab, u)
                stab_ids = encode_batch(stab.sequences, vocab, u)
                enc = replace(spec.encoder, seed=base.init_seed)
                tcfg = replace(spec.training, seed=base.sample_seed)
                params, report = train(train_ids, stab_ids, vocab, enc, tcfg)
                base.epochs, base.stop_reason = report.epochs_run, report.stop_reason
                base.final_avg_loss = report.final_avg_loss
                base.train_seconds = time.perf_counter() - t0
                test_ids = encode_dataset(test_ds, vocab, u)
                new = _evaluate_methods(spec, base, train_ids, test_ds, test_ids, params, vocab)
            except Exception as exc:  # record and continue with the next cell
                log.exception("split %s repetition %d failed", fraction, rep)
                new = [replace(base, method=m, status="failed", error=f"{type(exc).__name__}: {exc}")
                       for m in spec.methods]
            cells.extend(new)
            if progress:
                progress(new)
    return ExperimentResult(cells, spec.seed)
