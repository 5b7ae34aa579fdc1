"""Synthetic multi-domain classification data and feature-level augmentation.

Classes are isotropic Gaussian clusters around ``C`` prototypes in a canonical
space. Domain ``j`` maps canonical samples through ``x = s_j * R_j z + o_j``
where the rotation angle, log-scale and offset all grow linearly with
``j * shift_strength``, so ``shift_strength = 0`` makes every domain identical.

Hidden labels of unlabeled samples live in ``MultiDomainDataset.oracle`` and
are never exposed by the accessors the trainer uses for its loss.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError

# Calibration constants (see README); not derived from any reference value.
PROTOTYPE_SCALE = 0.75
CLUSTER_SIGMA = 1.0
LOG_SCALE_PER_SHIFT = 0.25
OFFSET_PER_SHIFT = 1.5


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    rotation_angle: float
    scale: float
    offset: np.ndarray
    noise_sigma: float

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigError("domain scale must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


@dataclass
class DomainData:
    domain_id: int
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray


@dataclass
class MultiDomainDataset:
    n_classes: int
    dim: int
    domains: list[DomainData]
    oracle: list[np.ndarray]  # hidden labels of each domain's unlabeled set
    specs: list[DomainSpec] = field(default_factory=list)
    prototypes: np.ndarray | None = None
    basis: np.ndarray | None = None

    @property
    def n_domains(self):
        return len(self.domains)

    def all_features(self, j):
        d = self.domains[j]
        return np.concatenate([d.labeled_x, d.unlabeled_x], axis=0)

    def all_labels(self, j):
        """Ground truth for ``all_features(j)``; for evaluation only."""
        return np.concatenate([self.domains[j].labeled_y, self.oracle[j]])

    def feature_stats(self, j):
        x = self.all_features(j)
        return x.mean(axis=0), x.std(axis=0)

    def subset(self, indices):
        """Dataset restricted to the given domains, renumbered 0..k-1 in that order."""
        doms, oracle, specs = [], [], []
        for new_id, j in enumerate(indices):
            d = self.domains[j]
            doms.append(DomainData(new_id, d.labeled_x, d.labeled_y, d.unlabeled_x))
            oracle.append(self.oracle[j])
            if self.specs:
                specs.append(self.specs[j])
        return MultiDomainDataset(self.n_classes, self.dim, doms, oracle, specs,
                                  self.prototypes, self.basis)


def rotation_matrix(dim, angle, basis):
    """Rotate by ``angle`` in every consecutive coordinate plane of ``basis``."""
    block = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for k in range(0, dim - 1, 2):
        block[k, k], block[k, k + 1] = c, -s
        block[k + 1, k], block[k + 1, k + 1] = s, c
    return basis @ block @ basis.T


def domain_specs(n_domains, dim, shift_strength, rng):
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    specs = []
    for j in range(n_domains):
        t = j * shift_strength
        specs.append(DomainSpec(
            domain_id=j,
            rotation_angle=t,
            scale=float(np.exp(LOG_SCALE_PER_SHIFT * t)),
            offset=OFFSET_PER_SHIFT * t * direction,
            noise_sigma=CLUSTER_SIGMA,
        ))
    return specs


def _transform(z, spec, basis):
    rot = rotation_matrix(z.shape[1], spec.rotation_angle, basis)
    return spec.scale * z @ rot.T + spec.offset


def generate(seed, n_domains, n_classes, dim, per_class_labeled, per_class_unlabeled,
             shift_strength):
    """Draw a MultiDomainDataset; a pure function of its arguments."""
    if n_domains < 2 or n_classes < 2 or dim < 2:
        raise ConfigError("need at least 2 domains, 2 classes and 2 dimensions")
    if per_class_labeled < 1:
        raise ConfigError("per_class_labeled must be >= 1")
    if per_class_unlabeled < 0 or shift_strength < 0:
        raise ConfigError("per_class_unlabeled and shift_strength must be non-negative")
    rng = np.random.default_rng(seed)
    prototypes = PROTOTYPE_SCALE * rng.normal(size=(n_classes, dim))
    basis, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    specs = domain_specs(n_domains, dim, shift_strength, rng)

    domains, oracle = [], []
    for spec in specs:
        parts = []
        for count in (per_class_labeled, per_class_unlabeled):
            y = np.repeat(np.arange(n_classes), count)
            z = prototypes[y] + spec.noise_sigma * rng.normal(size=(y.size, dim))
            order = rng.permutation(y.size)
            parts.append((_transform(z[order], spec, basis), y[order]))
        (lx, ly), (ux, uy) = parts
        domains.append(DomainData(spec.domain_id, lx, ly, ux))
        oracle.append(uy)
    return MultiDomainDataset(n_classes, dim, domains, oracle, specs, prototypes, basis)


def bayes_class(dataset, domain, x):
    """Nearest-prototype class after undoing the domain transform (the Bayes rule here)."""
    spec = dataset.specs[domain]
    x = np.atleast_2d(x)
    rot = rotation_matrix(dataset.dim, spec.rotation_angle, dataset.basis)
    z = (x - spec.offset) @ rot / spec.scale
    d2 = ((z[:, None, :] - dataset.prototypes[None]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


@dataclass(frozen=True)
class AugmentationOp:
    kind: str
    jitter_sigma: float
    dropout_prob: float = 0.0
    stat_mix_prob: float = 0.0

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise ConfigError(f"unknown augmentation kind {self.kind!r}")
        if self.jitter_sigma < 0:
            raise ConfigError("jitter_sigma must be non-negative")
        if not 0 <= self.dropout_prob < 1:
            raise ConfigError("dropout_prob must lie in [0, 1)")
        if not 0 <= self.stat_mix_prob <= 1:
            raise ConfigError("stat_mix_prob must lie in [0, 1]")
        if self.kind == "weak" and (self.dropout_prob or self.stat_mix_prob):
            raise ConfigError("weak augmentation has no dropout or statistics mixing")


def augment(x, op, donor_stats=None, seed=None):
    """Perturb one sample (shape [D]) or a batch (shape [B, D]).

    Jitter is added first, then strong views lose coordinates to dropout
    (no rescaling) and, with probability ``stat_mix_prob`` per sample, are
    re-standardized to the donor statistics: ``mu_d + sigma_d * (x - m_x) / s_x``
    where ``m_x``/``s_x`` are the sample's own mean and std over coordinates.
    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = np.atleast_2d(x).copy()
    b, d = out.shape
    out += op.jitter_sigma * rng.normal(size=(b, d))
    if op.kind == "strong":
        keep = rng.random((b, d)) >= op.dropout_prob
        out *= keep
        fire = rng.random(b) < op.stat_mix_prob
        if fire.any():
            if donor_stats is None:
                raise ContractError("statistics mixing needs donor_stats")
            mu_d, sd_d = (np.broadcast_to(np.asarray(s, dtype=np.float64), (b, d))
                          for s in donor_stats)
            m = out.mean(axis=1, keepdims=True)
            s = out.std(axis=1, keepdims=True)
            mixed = mu_d + sd_d * (out - m) / np.where(s > 0, s, 1.0)
            out = np.where(fire[:, None], mixed, out)
    return out[0] if single else out


# -- plain-text export ------------------------------------------------------
#
# Comment lines carry metadata as ``# key=value``; then a CSV header
# ``domain_id,split,label,f0..f{D-1}`` and one row per sample. ``split`` is
# ``labeled`` or ``unlabeled``; for unlabeled rows the label column holds the
# hidden oracle label. Floats are written with ``repr`` so a round trip is exact.

def dumps_dataset(dataset):
    buf = io.StringIO()
    buf.write(f"# n_domains={dataset.n_domains}\n")
    buf.write(f"# n_classes={dataset.n_classes}\n")
    buf.write(f"# dim={dataset.dim}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["domain_id", "split", "label"] + [f"f{k}" for k in range(dataset.dim)])
    for j, d in enumerate(dataset.domains):
        for x, y in zip(d.labeled_x, d.labeled_y):
            writer.writerow([j, "labeled", int(y)] + [repr(float(v)) for v in x])
        for x, y in zip(d.unlabeled_x, dataset.oracle[j]):
            writer.writerow([j, "unlabeled", int(y)] + [repr(float(v)) for v in x])
    return buf.getvalue()


def loads_dataset(text):
    meta = {}
    lines = text.splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = int(value)
        elif line.strip():
            body.append(line)
    try:
        n_domains, n_classes, dim = meta["n_domains"], meta["n_classes"], meta["dim"]
    except KeyError as exc:
        raise ConfigError(f"dataset file lacks metadata {exc.args[0]!r}") from None
    rows = list(csv.reader(body))[1:]
    buckets = {j: {"labeled": ([], []), "unlabeled": ([], [])} for j in range(n_domains)}
    for row in rows:
        j, split, label = int(row[0]), row[1], int(row[2])
        xs, ys = buckets[j][split]
        xs.append([float(v) for v in row[3:]])
        ys.append(label)

    def _arr(xs):
        return np.array(xs, dtype=np.float64).reshape(len(xs), dim)

    domains, oracle = [], []
    for j in range(n_domains):
        (lx, ly), (ux, uy) = buckets[j]["labeled"], buckets[j]["unlabeled"]
        domains.append(DomainData(j, _arr(lx), np.array(ly, dtype=np.int64), _arr(ux)))
        oracle.append(np.array(uy, dtype=np.int64))
    return MultiDomainDataset(n_classes, dim, domains, oracle)


def save_dataset(dataset, path):
    Path(path).write_text(dumps_dataset(dataset))


def load_dataset(path):
    return loads_dataset(Path(path).read_text())
