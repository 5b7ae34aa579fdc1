"""Decision rules over prediction matrices.

A prediction matrix ``Y`` is C x n with one softmax column per task; for a
model with N domains the columns are ``y_1 .. y_N`` (local) and ``y_{N+1}``
(global, last). Every tie is broken toward the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError

TRAIN_RULES = ("local-only", "max", "avg")
TEST_RULES = ("global-only", "avg", "avg-all", "max")
DEFAULT_TAU = 0.95


@dataclass(frozen=True)
class FusionScheme:
    train_rule: str = "max"
    test_rule: str = "avg"

    def __post_init__(self):
        if self.train_rule not in TRAIN_RULES:
            raise ConfigError(f"train_rule must be one of {TRAIN_RULES}, got {self.train_rule!r}")
        if self.test_rule not in TEST_RULES:
            raise ConfigError(f"test_rule must be one of {TEST_RULES}, got {self.test_rule!r}")


@dataclass(frozen=True)
class PseudoLabel:
    class_index: int
    confidence: float
    retained: bool


def _matrix(y):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or y.size == 0:
        raise ContractError(f"expected a non-empty C x n matrix, got shape {y.shape}")
    return y


def predict_label(y):
    """One-hot vector at the row whose maximum across columns is largest."""
    y = _matrix(y)
    row_max = y.max(axis=1)
    out = np.zeros(y.shape[0])
    out[int(np.argmax(row_max))] = 1.0
    return out


def select_task(y):
    """The column holding the global maximum entry of ``y``."""
    y = _matrix(y)
    col = int(np.argmax(y.max(axis=0)))
    return y[:, col].copy()


def train_pseudo_label(y, domain, scheme, tau=DEFAULT_TAU):
    """Pseudo-label for a sample of source domain ``domain`` from its C x (N+1) matrix."""
    y = _matrix(y)
    n_domains = y.shape[1] - 1
    if not 0 <= domain < n_domains:
        raise IndexError(f"domain {domain} out of range 0..{n_domains - 1}")
    rule = scheme.train_rule if isinstance(scheme, FusionScheme) else scheme
    local, glob = y[:, domain], y[:, n_domains]
    if rule == "max":
        fused = np.stack([local, glob], axis=1)
    elif rule == "avg":
        fused = ((local + glob) / 2)[:, None]
    elif rule == "local-only":
        fused = local[:, None]
    else:
        raise ConfigError(f"unknown train rule {rule!r}")
    cls = int(np.argmax(predict_label(fused)))
    conf = float(fused[cls].max())
    return PseudoLabel(cls, conf, conf >= tau)


def test_predict(y, scheme, n_domains=None):
    """Class index for a test sample under the given test rule."""
    y = _matrix(y)
    if n_domains is not None and y.shape[1] != n_domains + 1:
        raise ContractError(f"expected {n_domains + 1} columns, got {y.shape[1]}")
    if y.shape[1] < 2:
        raise ContractError("test fusion needs at least one local and the global column")
    rule = scheme.test_rule if isinstance(scheme, FusionScheme) else scheme
    glob = y[:, -1]
    if rule == "global-only":
        return int(np.argmax(glob))
    if rule == "avg-all":
        return int(np.argmax(y.mean(axis=1)))
    y_max = select_task(y[:, :-1])
    if rule == "avg":
        return int(np.argmax(predict_label((y_max + glob) / 2)))
    if rule == "max":
        return int(np.argmax(predict_label(np.stack([y_max, glob], axis=1))))
    raise ConfigError(f"unknown test rule {rule!r}")


def batch_pseudo_labels(y, domain, scheme, tau=DEFAULT_TAU):
    """Vectorized ``train_pseudo_label`` over a B x C x (N+1) stack.

    Returns ``(classes, confidences, retained)`` arrays.
    """
    y = np.asarray(y, dtype=np.float64)
    n_domains = y.shape[2] - 1
    if not 0 <= domain < n_domains:
        raise IndexError(f"domain {domain} out of range 0..{n_domains - 1}")
    rule = scheme.train_rule if isinstance(scheme, FusionScheme) else scheme
    local, glob = y[:, :, domain], y[:, :, n_domains]
    if rule == "max":
        scores = np.maximum(local, glob)
    elif rule == "avg":
        scores = (local + glob) / 2
    elif rule == "local-only":
        scores = local
    else:
        raise ConfigError(f"unknown train rule {rule!r}")
    cls = scores.argmax(axis=1)
    conf = scores[np.arange(len(cls)), cls]
    return cls, conf, conf >= tau


def batch_test_predict(y, scheme):
    """Vectorized ``test_predict`` over a B x C x (N+1) stack."""
    y = np.asarray(y, dtype=np.float64)
    rule = scheme.test_rule if isinstance(scheme, FusionScheme) else scheme
    glob = y[:, :, -1]
    if rule == "global-only":
        return glob.argmax(axis=1)
    if rule == "avg-all":
        return y.mean(axis=2).argmax(axis=1)
    local = y[:, :, :-1]
    col = local.max(axis=1).argmax(axis=1)
    y_max = local[np.arange(len(col)), :, col]
    if rule == "avg":
        return ((y_max + glob) / 2).argmax(axis=1)
    if rule == "max":
        return np.maximum(y_max, glob).argmax(axis=1)
    raise ConfigError(f"unknown test rule {rule!r}")
