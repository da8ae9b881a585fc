"""Flat ``key=value`` run configuration shared by the CLI and experiment specs."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .boundary import METHODS, AugmentationConfig, BoundaryConfig
from .scorer import EncoderConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


ENCODER_KEYS = {f.name: f.type for f in fields(EncoderConfig) if f.name != "seed"}
TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig) if f.name != "seed"}
_CASTS = {"int": int, "float": float, "str": str}

RUN_KEYS = {
    **ENCODER_KEYS,
    **TRAIN_KEYS,
    "seed": "int",
    "stab_per_source": "int",
    "alpha": "int",
    "p": "float",
    "beta": "float",
}
EXPERIMENT_KEYS = {
    **RUN_KEYS,
    "data": "str",
    "stab": "list",
    "splits": "floats",
    "methods": "list",
    "repetitions": "int",
    "max_lines": "int",
    "format": "str",
}


def derive_seed(master: int, *path: int) -> int:
    """Independent 32-bit seed for one stage, derived from the master seed."""
    return int(np.random.SeedSequence([master, *path]).generate_state(1)[0])


def parse_kv(text: str, allowed: dict[str, str] = RUN_KEYS) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        if key not in allowed:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = coerce(key, value, allowed)
    return out


def coerce(key: str, value: str, allowed: dict[str, str] = RUN_KEYS):
    kind = allowed[key]
    try:
        if kind == "list":
            return [v.strip() for v in value.split(",") if v.strip()]
        if kind == "floats":
            return [float(v) for v in value.split(",") if v.strip()]
        return _CASTS[kind](value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from None


def read_kv(path, allowed: dict[str, str] = RUN_KEYS) -> dict:
    return parse_kv(Path(path).read_text(encoding="utf-8"), allowed)


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    boundary: BoundaryConfig = field(default_factory=BoundaryConfig)
    stab_per_source: int = 60000
    seed: int = 0

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        """Build configs from parsed values; the master seed fans out to every stage."""
        seed = int(values.get("seed", 0))
        try:
            enc = EncoderConfig(**{k: values[k] for k in ENCODER_KEYS if k in values},
                                seed=derive_seed(seed, 0))
            tr = TrainConfig(**{k: values[k] for k in TRAIN_KEYS if k in values},
                             seed=derive_seed(seed, 1))
            aug = AugmentationConfig(alpha=values.get("alpha", 1), seed=derive_seed(seed, 2))
            bnd = BoundaryConfig(p=values.get("p", 0.95), beta=values.get("beta", 2.5))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(enc, tr, aug, bnd, int(values.get("stab_per_source", 60000)), seed)

    def as_mapping(self) -> dict:
        out = {k: getattr(self.encoder, k) for k in ENCODER_KEYS}
        out.update({k: getattr(self.training, k) for k in TRAIN_KEYS})
        out.update(seed=self.seed, stab_per_source=self.stab_per_source, alpha=self.augmentation.alpha,
                   p=self.boundary.p, beta=self.boundary.beta)
        return out


def dumps_kv(values: dict) -> str:
    lines = []
    for k, v in values.items():
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def validate_methods(methods) -> tuple[str, ...]:
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")
    return tuple(methods)

