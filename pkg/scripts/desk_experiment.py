"""Desk-scale split experiment on synthetic HPC-like corpora.

Generates a target corpus (50 normal templates, 10 anomaly templates, 20k lines,
8% anomalies) plus two anomaly-free sibling systems for the stabilization class,
then runs every split x repetition x boundary method and prints the summary.

    python3 scripts/desk_experiment.py --config configs/desk.cfg --out runs/desk
"""

import argparse
import logging
import sys
import time
from pathlib import Path

from a2log.config import RunConfig, read_kv
from a2log.corpus import SPLIT_FRACTIONS, generate_synthetic_corpus, write_dataset
from a2log.evaluator import ExperimentSpec, run_experiment


def desk_corpora(target_seed=1, stab_seeds=(101, 102), stab_lines=5000):
    target = generate_synthetic_corpus(50, 10, 20000, 0.08, seed=target_seed, name="target")
    external = [generate_synthetic_corpus(50, 0, stab_lines, 0.0, seed=s, name=f"sibling{s}")
                for s in stab_seeds]
    return target, external


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=Path(__file__).parents[1] / "configs" / "desk.cfg")
    ap.add_argument("--seed", type=int, help="master seed (overrides the config)")
    ap.add_argument("--repetitions", type=int, default=3)
    ap.add_argument("--splits", type=float, nargs="+", default=list(SPLIT_FRACTIONS))
    ap.add_argument("--out", type=Path)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    values = read_kv(args.config)
    if args.seed is not None:
        values["seed"] = args.seed
    run = RunConfig.from_mapping(values)
    target, external = desk_corpora()
    spec = ExperimentSpec(
        target=target, external=external, splits=tuple(args.splits),
        encoder=run.encoder, training=run.training, augmentation=run.augmentation,
        boundary=run.boundary, repetitions=args.repetitions,
        stab_per_source=run.stab_per_source, seed=run.seed,
    )
    t0 = time.perf_counter()
    result = run_experiment(spec, progress=lambda cells: logging.info(
        "split %.1f rep %d (%d epochs): %s | mean score %.4f, augmented %.4f",
        cells[0].split, cells[0].repetition, cells[0].epochs,
        " ".join(f"{c.method}={c.f1:.4f}" for c in cells),
        cells[0].mean_train_score, cells[0].mean_augmented_score))
    print(f"{'split':>5} {'method':<12} {'best F1':>8} {'mean F1':>8} {'epsilon':>10}")
    for row in result.summary_rows():
        print(f"{row['split']:>5} {row['method']:<12} {row['best_f1']:8.4f} {row['mean_f1']:8.4f} "
              f"{row['epsilon']:10.5f}")
    print(f"total {time.perf_counter() - t0:.0f} s")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        write_dataset(target, args.out / "target.log")
        for ds in external:
            write_dataset(ds, args.out / f"{ds.name}.log")
        (args.out / "results.csv").write_text(result.table_csv())
        (args.out / "summary.csv").write_text(result.summary_csv())
        (args.out / "results.json").write_text(result.to_json() + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
