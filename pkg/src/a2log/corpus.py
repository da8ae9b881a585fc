"""Labeled log corpora: loading, synthetic generation and chronological splits."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from pathlib import Path

NORMAL_LABEL = "-"


class MalformedLineError(ValueError):
    pass


class SplitError(ValueError):
    pass


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class LogRecord:
    index: int
    content: str
    label: int
    source: str = ""


@dataclass(frozen=True)
class LabeledDataset:
    records: tuple[LogRecord, ...]
    name: str = ""
    skipped: int = 0

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def contents(self) -> list[str]:
        return [r.content for r in self.records]

    @property
    def labels(self) -> list[int]:
        return [r.label for r in self.records]

    @property
    def n_normal(self) -> int:
        return sum(1 for r in self.records if r.label == 0)

    @property
    def n_abnormal(self) -> int:
        return len(self.records) - self.n_normal

    def normals(self) -> list[LogRecord]:
        return [r for r in self.records if r.label == 0]


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise SplitError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")


SPLIT_FRACTIONS = (0.1, 0.2, 0.4, 0.6)


def parse_labeled_log_line(line: str) -> tuple[int, str]:
    """Split ``"<label> <content...>"`` into ``(label, content)``.

    A label of ``-`` marks a normal message; any other first field is an
    alert category and marks the line abnormal.
    """
    parts = line.strip().split(None, 1)
    if len(parts) < 2 or not parts[1].strip():
        raise MalformedLineError(f"no content after label field: {line!r}")
    label = 0 if parts[0] == NORMAL_LABEL else 1
    return label, parts[1].strip()


def load_dataset(
    path: str | Path,
    format: str = "labeled-hpc",
    max_lines: int | None = None,
    name: str | None = None,
) -> LabeledDataset:
    """Read a line-oriented log file.

    ``max_lines`` caps how many physical lines are read from the head of the
    file. Malformed lines are skipped and counted in ``skipped``.
    """
    if format not in ("labeled-hpc", "plain-normal"):
        raise ValueError(f"unknown format {format!r}")
    path = Path(path)
    name = name if name is not None else path.stem
    records: list[LogRecord] = []
    skipped = 0
    with path.open("r", encoding="utf-8", errors="replace") as fh:
        for lineno, raw in enumerate(fh):
            if max_lines is not None and lineno >= max_lines:
                break
            if format == "plain-normal":
                content = raw.strip()
                if not content:
                    skipped += 1
                    continue
                label = 0
            else:
                try:
                    label, content = parse_labeled_log_line(raw)
                except MalformedLineError:
                    skipped += 1
                    continue
            records.append(LogRecord(len(records), content, label, name))
    return LabeledDataset(tuple(records), name, skipped)


def write_dataset(ds: LabeledDataset, path: str | Path, alert_tag: str = "ALERT") -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for r in ds.records:
            fh.write(f"{NORMAL_LABEL if r.label == 0 else alert_tag} {r.content}\n")


def chronological_split(ds: LabeledDataset, spec: SplitSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Train on the first ``floor(f * #normal)`` normal records in file order.

    Everything not selected, including anomalies that occur before the
    cutoff, goes to the test set.
    """
    n_normal = ds.n_normal
    if n_normal == 0:
        raise SplitError(f"dataset {ds.name!r} has no normal records")
    n_train = math.floor(spec.train_fraction * n_normal)
    if n_train == 0:
        raise SplitError(
            f"train_fraction {spec.train_fraction} of {n_normal} normal records selects nothing"
        )
    train, test = [], []
    taken = 0
    for r in ds.records:
        if r.label == 0 and taken < n_train:
            train.append(r)
            taken += 1
        else:
            test.append(r)
    return (
        LabeledDataset(tuple(train), f"{ds.name}[train]"),
        LabeledDataset(tuple(test), f"{ds.name}[test]"),
    )


# -- synthetic corpora -------------------------------------------------------

_ONSETS = "b c d f g h k l m n p r s t v w z br cr dr gr kr pl st tr sk sh ch".split()
_VOWELS = "a e i o u ai ea io ou".split()
_SLOTS = ("{num}", "{hex}", "{digit}")


def _pseudo_words(rng: random.Random, n: int, taken: set[str]) -> list[str]:
    words: list[str] = []
    while len(words) < n:
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(rng.randint(2, 4)))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def _make_template(rng: random.Random, pools: list[tuple[list[str], float]], n_words: int,
                   required: list[str] = (), n_required: int = 0) -> str:
    words, weights = zip(*pools)
    body = [rng.choice(rng.choices(words, weights)[0]) for _ in range(n_words)]
    for pos in rng.sample(range(n_words), n_required):
        body[pos] = rng.choice(required)
    for _ in range(rng.randint(0, 3)):
        body.insert(rng.randint(1, len(body)), rng.choice(_SLOTS))
    component = rng.choice(pools[0][0])
    return f"{component}: " + " ".join(body)


def _fill(template: str, rng: random.Random) -> str:
    out = []
    for part in template.split(" "):
        if part == "{num}":
            out.append(str(rng.randint(10, 99999)))
        elif part == "{hex}":
            out.append(f"0x{rng.getrandbits(32):08x}")
        elif part == "{digit}":
            out.append(str(rng.randint(0, 9)))
        else:
            out.append(part)
    return " ".join(out)


@dataclass
class SyntheticTemplates:
    normal: list[str]
    anomaly: list[str]


def make_templates(n_templates: int, n_anomaly_templates: int, seed: int, family: int = 0) -> SyntheticTemplates:
    """Templates for one system of a corpus family.

    Systems of the same family share a common lexicon and a fault lexicon.
    Each system splits the fault lexicon by ``seed`` into alarm words, used
    only by its anomaly templates, and routine words that its normal
    templates use. One system's alarms are thus routine chatter elsewhere.
    """
    fam = random.Random(f"family:{family}")
    taken: set[str] = set()
    common = _pseudo_words(fam, 60, taken)
    faults = _pseudo_words(fam, 80, taken)
    rng = random.Random(f"templates:{family}:{seed}")
    own = _pseudo_words(rng, max(40, 3 * n_templates), taken)
    rng.shuffle(faults)
    alarm, routine = faults[:40], faults[40:]
    normal_pools = [(own, 0.55), (common, 0.25), (routine, 0.2)]
    anomaly_pools = [(own, 0.6), (common, 0.4)]
    normal = [_make_template(rng, normal_pools, rng.randint(4, 9)) for _ in range(n_templates)]
    anomaly = []
    for _ in range(n_anomaly_templates):
        n_words = rng.randint(4, 9)
        anomaly.append(_make_template(rng, anomaly_pools, n_words, alarm, max(2, n_words // 2)))
    overlap = set(normal) & set(anomaly)
    if overlap or len(set(normal)) != len(normal):
        raise GenerationError(f"template collision: {sorted(overlap)[:3]}")
    return SyntheticTemplates(normal, anomaly)


def generate_synthetic_corpus(
    n_templates: int,
    n_anomaly_templates: int,
    n_lines: int,
    anomaly_rate: float,
    seed: int,
    name: str = "synthetic",
    family: int = 0,
) -> LabeledDataset:
    """Draw an HPC-style labeled corpus from fixed random templates.

    Each line is anomalous independently with probability ``anomaly_rate``.
    Normal and anomalous templates never share text; at least half of every
    anomalous template consists of the system's alarm words, which never occur
    in its normal lines.
    """
    if n_templates < 2:
        raise GenerationError("need at least two normal templates")
    if not 0.0 <= anomaly_rate < 1.0:
        raise GenerationError(f"anomaly_rate must lie in [0, 1), got {anomaly_rate}")
    if anomaly_rate > 0 and n_anomaly_templates < 1:
        raise GenerationError("anomaly_rate > 0 requires at least one anomaly template")
    templates = make_templates(n_templates, n_anomaly_templates, seed, family)
    rng = random.Random(f"lines:{seed}")
    clock = 1117838570
    records = []
    for i in range(n_lines):
        clock += rng.randint(0, 3)
        if anomaly_rate > 0 and rng.random() < anomaly_rate:
            label, body = 1, _fill(rng.choice(templates.anomaly), rng)
        else:
            label, body = 0, _fill(rng.choice(templates.normal), rng)
        records.append(LogRecord(i, f"{clock} {body}", label, name))
    return LabeledDataset(tuple(records), name)

