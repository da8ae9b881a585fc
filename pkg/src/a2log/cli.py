"""Command line: ``a2log {synth,train,calibrate,evaluate,experiment,plot}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .boundary import (
    METHODS,
    AugmentationConfig,
    BoundaryConfig,
    DecisionBoundary,
    ScoreDistribution,
    a2log_boundary,
    best_oracle_boundary,
    score_distribution,
    three_sigma_boundary,
)
from .checkpoint import CheckpointError, fingerprint, load_checkpoint, save_checkpoint
from .config import EXPERIMENT_KEYS, ConfigError, RunConfig, coerce, read_kv, validate_methods
from .corpus import (
    SplitSpec,
    chronological_split,
    generate_synthetic_corpus,
    load_dataset,
    write_dataset,
)
from .evaluator import ExperimentSpec, classify_dataset, confusion_and_metrics, encode_dataset, run_experiment
from .scorer import score_batch
from .tokenizer import build_vocabulary, encode_batch, prepare
from .trainer import TrainingDivergedError, build_stabilization_set, train

log = logging.getLogger("a2log")


class UsageError(Exception):
    pass


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, config: dict, inputs: list, outputs: list, seed: int,
                   started: str) -> None:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "master_seed": seed,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "started": started,
        "finished": _now(),
    }
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _fraction(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"must lie strictly between 0 and 1, got {text}")
    return value


def _percentile(text: str) -> float:
    value = float(text)
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def _run_config(args) -> RunConfig:
    values = read_kv(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        if key not in EXPERIMENT_KEYS:
            raise UsageError(f"--set: unknown key {key!r}")
        values[key] = coerce(key, value, EXPERIMENT_KEYS)
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "stab_per_source", None) is not None:
        values["stab_per_source"] = args.stab_per_source
    return RunConfig.from_mapping({k: v for k, v in values.items() if k in EXPERIMENT_KEYS})


# -- commands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    started = _now()
    ds = generate_synthetic_corpus(args.templates, args.anomaly_templates, args.lines, args.rate,
                                   args.seed, name=args.out.stem, family=args.family)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, args.out)
    config = {"templates": args.templates, "anomaly_templates": args.anomaly_templates,
              "lines": args.lines, "rate": args.rate, "family": args.family}
    write_manifest(args.out.with_name(args.out.name + ".manifest.json"), "synth", config, [],
                   [args.out], args.seed, started)
    print(f"wrote {len(ds)} lines ({ds.n_abnormal} abnormal) to {args.out}")
    return 0


def cmd_train(args) -> int:
    started = _now()
    run = _run_config(args)
    target = load_dataset(args.data, max_lines=args.max_lines)
    stab_sets = [load_dataset(p, max_lines=args.max_lines) for p in args.stab]
    train_ds, test_ds = chronological_split(target, SplitSpec(args.split, run.seed))
    u = run.encoder.u
    stab = build_stabilization_set(stab_sets, run.stab_per_source, run.training.seed, u, target.name)
    train_seqs = [prepare(c, u) for c in train_ds.contents]
    vocab = build_vocabulary(train_seqs + stab.sequences)
    params, report = train(encode_batch(train_seqs, vocab, u), encode_batch(stab.sequences, vocab, u),
                           vocab, run.encoder, run.training)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    fp = save_checkpoint(params, run.encoder, vocab, out / "checkpoint.a2lg")
    vocab.save(out / "vocab.txt")
    write_dataset(train_ds, out / "train_split.log")
    write_dataset(test_ds, out / "test_split.log")
    (out / "train_report.json").write_text(json.dumps(asdict(report), indent=2) + "\n", encoding="utf-8")
    config = {**run.as_mapping(), "split": args.split, "checkpoint_fingerprint": fp}
    outputs = [out / n for n in ("checkpoint.a2lg", "vocab.txt", "train_split.log", "test_split.log",
                                 "train_report.json")]
    write_manifest(out / "manifest.json", "train", config, [args.data, *args.stab], outputs,
                   run.seed, started)
    print(f"trained {report.epochs_run} epochs ({report.stop_reason}), "
          f"final avg loss {report.final_avg_loss:.5f}; checkpoint {fp}")
    return 0


def _training_ids(path, vocab, u) -> np.ndarray:
    ds = load_dataset(path)
    normals = [r.content for r in ds.records if r.label == 0]
    if not normals:
        raise UsageError(f"{path} contains no normal training records")
    return encode_batch([prepare(c, u) for c in normals], vocab, u)


def cmd_calibrate(args) -> int:
    if args.method == "best-oracle" and not args.test:
        raise UsageError("--method best-oracle needs labeled --test data")
    started = _now()
    params, config, vocab = load_checkpoint(args.checkpoint)
    fp = fingerprint(args.checkpoint)
    inputs = [args.checkpoint]
    if args.method == "best-oracle":
        test = load_dataset(args.test)
        scores = score_batch(encode_dataset(test, vocab, config.u), params, config)
        b, f1 = best_oracle_boundary(zip(scores, test.labels), checkpoint=fp)
        b.provenance["f1"] = repr(f1)
        inputs.append(args.test)
    else:
        train_ids = _training_ids(args.train, vocab, config.u)
        inputs.append(args.train)
        if args.method == "a2log":
            aug = AugmentationConfig(alpha=args.alpha, seed=args.seed)
            dist = score_distribution(train_ids, params, config, aug)
            b = a2log_boundary(dist, BoundaryConfig(args.p, args.beta), alpha=args.alpha,
                               seed=args.seed, checkpoint=fp)
        else:
            b = three_sigma_boundary(ScoreDistribution(score_batch(train_ids, params, config)),
                                     checkpoint=fp)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    b.save(args.out)
    write_manifest(args.out.with_name(args.out.name + ".manifest.json"), "calibrate",
                   {"method": args.method, "alpha": args.alpha, "p": args.p, "beta": args.beta},
                   inputs, [args.out], args.seed, started)
    print(f"{b.method} boundary epsilon={b.epsilon!r} -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    started = _now()
    params, config, vocab = load_checkpoint(args.checkpoint)
    b = DecisionBoundary.load(args.boundary)
    fp = fingerprint(args.checkpoint)
    if b.provenance.get("checkpoint") != fp:
        raise CheckpointError(
            f"boundary was calibrated for checkpoint {b.provenance.get('checkpoint')!r}, "
            f"not {fp!r}; boundaries are model-specific"
        )
    test = load_dataset(args.test)
    rows = classify_dataset(test, params, vocab, config, b)
    if not rows:
        raise UsageError(f"{args.test} contains no records")
    m = confusion_and_metrics([(lab, pred) for lab, pred, _ in rows])
    doc = {
        "precision": m.precision, "recall": m.recall, "f1": m.f1, "counts": asdict(m.counts),
        "boundary": {"method": b.method, "epsilon": b.epsilon, **b.provenance},
        "test": str(args.test), "n": len(rows),
    }
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    write_manifest(args.out.with_name(args.out.name + ".manifest.json"), "evaluate", {},
                   [args.checkpoint, args.boundary, args.test], [args.out], 0, started)
    print(f"P={m.precision:.4f} R={m.recall:.4f} F1={m.f1:.4f} -> {args.out}")
    return 0


def load_experiment_spec(path, seed=None) -> tuple[ExperimentSpec, dict]:
    values = read_kv(path, EXPERIMENT_KEYS)
    if seed is not None:
        values["seed"] = seed
    base = Path(path).parent
    try:
        data = values.pop("data")
        stab = values.pop("stab")
    except KeyError as exc:
        raise ConfigError(f"experiment spec needs key {exc}") from None
    fmt = values.pop("format", "labeled-hpc")
    max_lines = values.pop("max_lines", None)
    resolve = lambda p: Path(p) if Path(p).is_absolute() else base / p
    target = load_dataset(resolve(data), fmt, max_lines)
    external = [load_dataset(resolve(p), max_lines=max_lines) for p in stab]
    run = RunConfig.from_mapping(values)
    spec = ExperimentSpec(
        target=target, external=external,
        splits=tuple(values.get("splits", (0.1, 0.2, 0.4, 0.6))),
        encoder=run.encoder, training=run.training,
        augmentation=run.augmentation, boundary=run.boundary,
        methods=validate_methods(values.get("methods", METHODS)),
        repetitions=int(values.get("repetitions", 3)),
        stab_per_source=run.stab_per_source, seed=run.seed,
    )
    inputs = [resolve(data), *[resolve(p) for p in stab]]
    return spec, {"run": run.as_mapping(), "inputs": inputs, "splits": list(spec.splits),
                  "methods": list(spec.methods), "repetitions": spec.repetitions}


def cmd_experiment(args) -> int:
    started = _now()
    spec, meta = load_experiment_spec(args.spec, args.seed)
    result = run_experiment(spec, progress=lambda cells: log.info(
        "split %s rep %d: %s", cells[0].split, cells[0].repetition,
        ", ".join(f"{c.method} F1={c.f1:.4f}" for c in cells)))
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.json").write_text(result.to_json() + "\n", encoding="utf-8")
    (out / "results.csv").write_text(result.table_csv(), encoding="utf-8")
    (out / "summary.csv").write_text(result.summary_csv(), encoding="utf-8")
    inputs = meta.pop("inputs")
    write_manifest(out / "manifest.json", "experiment", meta, [args.spec, *inputs],
                   [out / "results.csv", out / "summary.csv"], spec.seed, started)
    for row in result.summary_rows():
        print(f"split={row['split']:<5} {row['method']:<12} best F1={row['best_f1']:.4f} "
              f"(mean {row['mean_f1']:.4f} +- {row['std_f1']:.4f})")
    failed = sum(c.status != "ok" for c in result.cells)
    return 1 if failed == len(result.cells) else 0


def cmd_plot(args) -> int:
    import csv

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(args.summary, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise UsageError(f"{args.summary} holds no rows")
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in METHODS:
        pts = sorted((float(r["split"]), float(r["best_f1"])) for r in rows if r["method"] == method)
        if pts:
            ax.plot([100 * x for x, _ in pts], [y for _, y in pts], marker="o", label=method)
    ax.set_xlabel("training split (% of normal data)")
    ax.set_ylabel("F1 (best of repetitions)")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="a2log", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--templates", type=int, required=True)
    p.add_argument("--anomaly-templates", type=int, required=True)
    p.add_argument("--lines", type=int, required=True)
    p.add_argument("--rate", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--family", type=int, default=0, help="corpora of one family share a lexicon")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the scorer on a chronological split")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--stab", type=Path, action="append", required=True,
                   help="external corpus for the stabilization class (repeatable)")
    p.add_argument("--split", type=_fraction, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--stab-per-source", type=_positive_int)
    p.add_argument("--max-lines", type=_positive_int)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="compute a decision boundary for a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--train", type=Path, help="training data (labeled-HPC; normals are used)")
    p.add_argument("--test", type=Path, help="labeled test data (best-oracle only)")
    p.add_argument("--method", choices=METHODS, default="a2log")
    p.add_argument("--alpha", type=_positive_int, default=1)
    p.add_argument("--p", type=_percentile, default=0.95)
    p.add_argument("--beta", type=_positive_float, default=2.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="apply a boundary to labeled test data")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--boundary", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run the split protocol from a spec file")
    p.add_argument("--spec", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("plot", help="plot best-of-repetitions F1 from summary.csv")
    p.add_argument("summary", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "calibrate" and args.method != "best-oracle" and not args.train:
        parser.error("--train is required unless --method best-oracle")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"a2log: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"a2log: training diverged: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, CheckpointError) as exc:
        print(f"a2log: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
