"""Run configuration: flat ``section.key = value`` text with JSON-style values.

Example::

    # comments start with '#'
    seed = 7
    model.name = lightgcn
    attack.name = psmu
    attack.fraction = 0.01
    defense.name = hics
    model.layers = [64, 32, 16]

Bare words are read as strings; anything else is decoded as JSON.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from .attacks import ATTACKS
from .defenses import DEFENSES
from .models import HEADS, MODELS


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass
class DatasetSection:
    source: str = "synth"
    path: str = ""
    format: str = "movielens-dat"
    users: int = 200
    items: int = 300
    density: float = 0.05
    skew: float = 1.0
    test_fraction: float = 0.2
    neg_ratio: int = 4
    split: str = "random"
    seed: int = -1  # -1: derive from the master seed


@dataclass
class ModelSection:
    name: str = "ncf"
    head: str = "mlp"
    dim: int = 32
    layers: list = field(default_factory=lambda: [64, 32, 16])
    init_std: float = 0.1


@dataclass
class TrainSection:
    epochs: int = 30
    local_epochs: int = 2
    lr: float = 0.001
    batch_size: int = 0
    client_fraction: float = 1.0
    workers: int = 1


@dataclass
class MetricsSection:
    er_k: int = 5
    hr_k: int = 20


@dataclass
class AttackSection:
    name: str = "none"
    fraction: float = 0.001
    count: int = 0
    num_targets: int = 1
    targets: list = field(default_factory=list)
    alpha: int = 30
    num_alternatives: int = 5
    start: int = 8
    top_k: int = 5
    fit_steps: int = 50
    fit_lr: float = 0.05
    fit_init_std: float = 0.01
    poison_steps: int = 10
    poison_lr: float = 0.0  # 0: same as train.lr
    poison_theta_lr: float = 0.0  # 0: same as train.lr


@dataclass
class DefenseSection:
    name: str = "none"
    clip: float = 1.0
    sparsity: float = 0.1
    per_row_clip: bool = False
    adaptive_clip: bool = True
    trim: int = 1
    contributors_only: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    name: str = ""
    out: str = "results"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    attack: AttackSection = field(default_factory=AttackSection)
    defense: DefenseSection = field(default_factory=DefenseSection)

    def flat(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if dataclasses.is_dataclass(val):
                for sub in fields(val):
                    out[f"{f.name}.{sub.name}"] = getattr(val, sub.name)
            else:
                out[f.name] = val
        return out

    def malicious_count(self, num_users: int) -> int:
        if self.attack.name == "none":
            return 0
        if self.attack.count > 0:
            return self.attack.count
        return max(1, round(self.attack.fraction * num_users))


def decode_value(raw: str):
    """JSON when it parses, otherwise the stripped bare word."""
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(key, f"expected true/false, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, (str, int, float)) or isinstance(value, bool):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return str(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return list(value)
    return value


def apply_overrides(cfg: RunConfig, pairs: dict) -> RunConfig:
    defaults = RunConfig().flat()
    for key, value in pairs.items():
        if key not in defaults:
            raise ConfigError(key, "unknown key")
        value = _coerce(key, value, defaults[key])
        if "." in key:
            section, name = key.split(".", 1)
            setattr(getattr(cfg, section), name, value)
        else:
            setattr(cfg, key, value)
    validate(cfg)
    return cfg


def parse_config(text: str) -> RunConfig:
    """Parse and validate a config document; unspecified keys keep their defaults."""
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line.strip()!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key in pairs:
            raise ConfigError(key, "duplicate key")
        pairs[key] = decode_value(raw)
    return apply_overrides(RunConfig(), pairs)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.flat().items():
        if isinstance(value, str) and value and value.strip() == value and decode_value(value) == value \
                and "#" not in value:
            lines.append(f"{key} = {value}")
        else:
            lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def _check(cond, key, msg):
    if not cond:
        raise ConfigError(key, msg)


def validate(cfg: RunConfig) -> None:
    d, m, t, a, df = cfg.dataset, cfg.model, cfg.train, cfg.attack, cfg.defense
    _check(d.source in ("synth", "file"), "dataset.source", "must be 'synth' or 'file'")
    _check(d.source != "file" or d.path, "dataset.path", "required when dataset.source = file")
    _check(d.format in ("movielens-dat", "csv"), "dataset.format", "must be 'movielens-dat' or 'csv'")
    _check(d.users > 0, "dataset.users", "must be positive")
    _check(d.items > 0, "dataset.items", "must be positive")
    _check(0 < d.density < 1, "dataset.density", "must be in (0, 1)")
    _check(d.skew >= 0, "dataset.skew", "must be >= 0")
    _check(0 < d.test_fraction < 1, "dataset.test_fraction", "must be in (0, 1)")
    _check(d.neg_ratio >= 1, "dataset.neg_ratio", "must be >= 1")
    _check(d.split in ("random", "temporal"), "dataset.split", "must be 'random' or 'temporal'")
    _check(m.name in MODELS, "model.name", f"unknown model; expected one of {MODELS}")
    _check(m.head in HEADS, "model.head", f"unknown head; expected one of {HEADS}")
    _check(m.dim > 0, "model.dim", "must be positive")
    _check(len(m.layers) >= 1 and all(isinstance(x, int) and x > 0 for x in m.layers), "model.layers",
           "must be a non-empty list of positive integers")
    _check(m.layers[0] == 2 * m.dim, "model.layers", f"first width must equal 2*model.dim = {2 * m.dim}")
    _check(m.init_std > 0, "model.init_std", "must be positive")
    _check(t.epochs > 0, "train.epochs", "must be positive")
    _check(t.local_epochs >= 0, "train.local_epochs", "must be >= 0")
    _check(t.lr > 0, "train.lr", "must be positive")
    _check(t.batch_size >= 0, "train.batch_size", "must be >= 0")
    _check(0 < t.client_fraction <= 1, "train.client_fraction", "must be in (0, 1]")
    _check(t.workers >= 1, "train.workers", "must be >= 1")
    _check(cfg.metrics.er_k > 0, "metrics.er_k", "must be positive")
    _check(cfg.metrics.hr_k > 0, "metrics.hr_k", "must be positive")
    _check(a.name in ATTACKS, "attack.name", f"unknown attack; expected one of {ATTACKS}")
    _check(0 <= a.fraction < 1, "attack.fraction", "must be in [0, 1)")
    _check(a.count >= 0, "attack.count", "must be >= 0")
    _check(a.num_targets > 0, "attack.num_targets", "must be positive")
    _check(all(isinstance(x, int) and x >= 0 for x in a.targets), "attack.targets", "must be item ids")
    _check(a.alpha >= 1, "attack.alpha", "must be >= 1")
    _check(a.num_alternatives >= 0, "attack.num_alternatives", "must be >= 0")
    _check(a.start >= 1, "attack.start", "must be >= 1")
    _check(a.top_k >= 1, "attack.top_k", "must be >= 1")
    _check(a.fit_steps >= 0, "attack.fit_steps", "must be >= 0")
    _check(a.fit_lr > 0, "attack.fit_lr", "must be positive")
    _check(a.fit_init_std > 0, "attack.fit_init_std", "must be positive")
    _check(a.poison_steps >= 0, "attack.poison_steps", "must be >= 0")
    _check(a.poison_lr >= 0, "attack.poison_lr", "must be >= 0")
    _check(a.poison_theta_lr >= 0, "attack.poison_theta_lr", "must be >= 0")
    _check(df.name in DEFENSES, "defense.name", f"unknown defense; expected one of {DEFENSES}")
    _check(df.clip > 0, "defense.clip", "must be positive")
    _check(0 < df.sparsity <= 1, "defense.sparsity", "must be in (0, 1]")
    _check(df.trim >= 0, "defense.trim", "must be >= 0")
