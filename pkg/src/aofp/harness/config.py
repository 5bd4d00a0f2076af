"""Run configuration: one JSON document, overridable by ``--key value`` flags."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from ..engine import AofpConfig
from ..trainer import TrainConfig
from .data import DatasetDescriptor

OUTPUT_ENV = "AOFP_OUTPUT_DIR"
PIPELINES = ("train", "prune", "prune-baseline", "redesign", "flops", "eval")
SECTIONS = {"dataset": DatasetDescriptor, "train": TrainConfig, "aofp": AofpConfig}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    pipeline: str = "train"
    preset: str = "vgg-small"
    widths: list | None = None  # per prunable conv, overrides the preset
    scale: float = 1.5  # redesign only
    checkpoint: str | None = None  # input model for prune / prune-baseline / eval
    output_dir: str = "runs/out"
    seed: int = 0
    layer: int | None = None  # prune-baseline target; defaults to the first conv
    methods: list = field(default_factory=lambda: ["oracle", "degraded", "magnitude", "apoz",
                                                   "taylor", "index", "aofp_single_layer"])
    max_pruned: int | None = None
    dataset: DatasetDescriptor = field(default_factory=DatasetDescriptor)
    train: TrainConfig = field(default_factory=lambda: TrainConfig.desk(1500))
    aofp: AofpConfig = field(default_factory=lambda: AofpConfig(theta=0.05, phi=200))

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"unknown pipeline {self.pipeline!r}; choose from {PIPELINES}")
        if self.dataset.n_assess <= 0:
            raise ConfigError("assessment set size must be positive")

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kw = {}
        for name, section in SECTIONS.items():
            sub = d.pop(name, None)
            if sub is not None:
                kw[name] = _build(section, sub, name)
        try:
            return cls(**d, **kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e


def _build(section, values, name):
    known = {f.name for f in fields(section)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {name} keys {sorted(unknown)}")
    try:
        return section(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from e


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(tokens):
    """``["--a-b", "1", "--train.lr_schedule", "[[0, 0.1]]"]`` -> ``{"a_b": 1, "train.lr_schedule": [[0, 0.1]]}``."""
    out = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"expected a --key, got {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            try:
                raw = next(it)
            except StopIteration:
                raise ConfigError(f"flag {tok} needs a value") from None
        out[key] = _parse_value(raw)
    return out


def resolve(base, overrides, env=None):
    """Apply flat overrides to a config dict and rebuild the RunConfig.

    Unqualified keys go to the top level when they exist there, else to the
    single section that owns them; ``section.key`` addresses one section
    explicitly. The top-level seed is copied into every section.
    """
    env = os.environ if env is None else env
    d = RunConfig.from_dict(base).to_dict() if not isinstance(base, RunConfig) else base.to_dict()
    top = {f.name for f in fields(RunConfig)} - set(SECTIONS)
    for key, value in overrides.items():
        if "." in key:
            sec, sub = key.split(".", 1)
            if sec not in SECTIONS or sub not in {f.name for f in fields(SECTIONS[sec])}:
                raise ConfigError(f"unknown option --{key}")
            d[sec][sub] = value
            continue
        if key in top:
            d[key] = value
            if key == "seed":
                for sec in SECTIONS:
                    d[sec]["seed"] = value
            continue
        owners = [s for s, cls in SECTIONS.items() if key in {f.name for f in fields(cls)}]
        if not owners:
            raise ConfigError(f"unknown option --{key}")
        if len(owners) > 1:
            raise ConfigError(f"--{key} is ambiguous; use one of " + ", ".join(f"--{s}.{key}" for s in owners))
        d[owners[0]][key] = value
    if env.get(OUTPUT_ENV):
        d["output_dir"] = env[OUTPUT_ENV]
    return RunConfig.from_dict(d)


def load_config(path=None, overrides=(), env=None):
    base = {}
    if path is not None:
        try:
            with open(path) as f:
                base = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(base, dict):
            raise ConfigError("config must be a JSON object")
    return resolve(base, parse_overrides(list(overrides)), env)
