"""Experiment configuration and its plain-text file format.

The file holds one ``key = value`` pair per line; ``#`` starts a comment and
blank lines are ignored. Keys are the ``ExperimentConfig`` field names. The
keys in ``REQUIRED_KEYS`` must be present (in the file or as overrides);
everything else falls back to the defaults below. Example::

    # desk-scale default benchmark
    seed = 0
    n_domains = 3
    n_classes = 4
    dim = 16
    labels_per_class = 5
    unlabeled_per_class = 100
    shift_strength = 0.6
    train_rule = max
    test_rule = avg
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .data import AugmentationOp
from .errors import ConfigError
from .fusion import TRAIN_RULES, TEST_RULES, FusionScheme
from .model import MODES

REQUIRED_KEYS = ("seed", "n_domains", "n_classes", "dim", "labels_per_class",
                 "unlabeled_per_class", "shift_strength")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    n_domains: int = 3  # source domains; one more is generated as the target
    n_classes: int = 4
    dim: int = 16
    labels_per_class: int = 5
    unlabeled_per_class: int = 100
    shift_strength: float = 0.6
    target_domain: int = -1  # index among the N+1 generated domains; -1 = last
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    lr: float = 0.1  # plain SGD from scratch; 0.003 underfits at 2000 iterations
    max_iter: int = 2000
    epoch_iters: int = 50
    tau: float = 0.95
    unsup_weight: float = 1.0
    train_rule: str = "max"
    test_rule: str = "avg"
    bn_mode: str = "per-task"
    head_mode: str = "per-task"
    hidden: int = 64
    depth: int = 2
    weak_jitter: float = 0.1
    strong_jitter: float = 0.3
    strong_dropout: float = 0.2
    strong_stat_mix: float = 0.5

    def __post_init__(self):
        if self.batch_labeled < 2 or self.batch_unlabeled < 2:
            raise ConfigError("batch sizes must be >= 2 for batch normalization")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1", key="max_iter")
        if self.epoch_iters < 1:
            raise ConfigError("epoch_iters must be >= 1", key="epoch_iters")
        if self.n_domains < 1 or self.n_classes < 2 or self.dim < 2:
            raise ConfigError("need n_domains >= 1, n_classes >= 2, dim >= 2")
        if self.labels_per_class < 1:
            raise ConfigError("labels_per_class must be >= 1", key="labels_per_class")
        if not -1 <= self.target_domain <= self.n_domains:
            raise ConfigError(f"target_domain must be -1 or in 0..{self.n_domains}")
        if self.lr < 0 or self.unsup_weight < 0 or self.shift_strength < 0:
            raise ConfigError("lr, unsup_weight and shift_strength must be non-negative")
        if self.bn_mode not in MODES or self.head_mode not in MODES:
            raise ConfigError(f"bn_mode and head_mode must be one of {MODES}")
        if self.hidden < 1 or self.depth < 1:
            raise ConfigError("hidden and depth must be >= 1")
        FusionScheme(self.train_rule, self.test_rule)
        self.weak_aug
        self.strong_aug

    @property
    def scheme(self):
        return FusionScheme(self.train_rule, self.test_rule)

    @property
    def weak_aug(self):
        return AugmentationOp("weak", self.weak_jitter)

    @property
    def strong_aug(self):
        return AugmentationOp("strong", self.strong_jitter, self.strong_dropout, self.strong_stat_mix)

    @property
    def target(self):
        return self.n_domains if self.target_domain == -1 else self.target_domain

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        """Canonical text: every field, in declaration order."""
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    def config_hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
CHOICES = {"train_rule": TRAIN_RULES, "test_rule": TEST_RULES, "bn_mode": MODES, "head_mode": MODES}


def coerce(key, raw, line=None):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown key {key!r}", line=line, key=key)
    kind = FIELD_TYPES[key]
    raw = str(raw).strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}", line=line, key=key) from None
    if key in CHOICES and raw not in CHOICES[key]:
        raise ConfigError(f"{key}: expected one of {CHOICES[key]}, got {raw!r}", line=line, key=key)
    return raw


def parse_config_text(text):
    """Parse config text into ``{key: (value, line_number)}``."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"expected 'key = value', got {content!r}", line=lineno)
        key, _, raw = content.partition("=")
        key = key.strip()
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", line=lineno, key=key)
        out[key] = (coerce(key, raw, lineno), lineno)
    return out


def build_config(parsed, overrides=None):
    values = {k: v for k, (v, _) in parsed.items()}
    for key, raw in (overrides or {}).items():
        if raw is not None:
            values[key] = coerce(key, raw)
    missing = [k for k in REQUIRED_KEYS if k not in values]
    if missing:
        raise ConfigError(f"missing required key {missing[0]!r}", key=missing[0])
    try:
        return ExperimentConfig(**values)
    except ConfigError as exc:
        if exc.key in parsed:
            raise ConfigError(str(exc), line=parsed[exc.key][1], key=exc.key) from None
        raise


def load_config(path, overrides=None):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {str(path)!r} not found")
    return build_config(parse_config_text(path.read_text()), overrides)
