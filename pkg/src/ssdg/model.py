"""Shared-backbone MLP with per-task batch normalization and classifier heads.

Task indices ``0..N-1`` are the local (per-domain) tasks and index ``N`` is the
global task. Each backbone layer is ``linear -> BN(task) -> relu``; the head of
the selected task maps the last hidden layer to logits. With ``bn_mode`` or
``head_mode`` set to ``"shared"`` all task indices alias a single parameter set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import (
    Tensor,
    batch_norm_eval,
    batch_norm_train,
    linear,
    no_grad,
    relu,
    softmax,
)
from .errors import BatchSizeError, ConfigError, UninitializedStatsError

MODES = ("per-task", "shared")
CHECKPOINT_FORMAT = "ssdg-checkpoint/1"


@dataclass
class BNParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    num_batches_tracked: int = 0

    @classmethod
    def create(cls, width, momentum=0.1, eps=1e-5):
        return cls(
            gamma=Tensor(np.ones(width), requires_grad=True),
            beta=Tensor(np.zeros(width), requires_grad=True),
            running_mean=np.zeros(width),
            running_var=np.ones(width),
            momentum=momentum,
            eps=eps,
        )


def bn_forward(f_d, bn, mode, update_stats=True):
    """Batch normalization of a B x H batch with one BNParams set.

    Train mode uses the batch's own statistics and (unless ``update_stats`` is
    False) folds them into the running estimates with the unbiased variance.
    Eval mode uses the running estimates and refuses to run before any update.
    """
    if mode == "train":
        b = f_d.shape[0]
        if b < 2:
            raise BatchSizeError(f"train-mode batch norm needs >= 2 samples, got {b}")
        out, mean, var = batch_norm_train(f_d, bn.gamma, bn.beta, bn.eps)
        if update_stats:
            m = bn.momentum
            bn.running_mean = (1 - m) * bn.running_mean + m * mean
            bn.running_var = (1 - m) * bn.running_var + m * var * b / (b - 1)
            bn.num_batches_tracked += 1
        return out
    if mode == "eval":
        if bn.num_batches_tracked == 0:
            raise UninitializedStatsError("running statistics were never updated")
        return batch_norm_eval(f_d, bn.gamma, bn.beta, bn.running_mean, bn.running_var, bn.eps)
    raise ConfigError(f"unknown mode {mode!r}")


def _affine(fan_in, fan_out, rng):
    w = rng.normal(scale=np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
    return Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True)


@dataclass
class MultiTaskModel:
    dim: int
    n_classes: int
    n_domains: int
    hidden: tuple = (64, 64)
    bn_mode: str = "per-task"
    head_mode: str = "per-task"
    seed: int = 0
    backbone: list = field(init=False)
    bn_sets: list = field(init=False)
    heads: list = field(init=False)

    def __post_init__(self):
        if self.bn_mode not in MODES or self.head_mode not in MODES:
            raise ConfigError(f"bn_mode/head_mode must be one of {MODES}")
        rng = np.random.default_rng(self.seed)
        widths = (self.dim,) + tuple(self.hidden)
        self.backbone = [_affine(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        n_tasks = self.n_tasks
        self.bn_sets = []
        for width in self.hidden:
            if self.bn_mode == "shared":
                self.bn_sets.append([BNParams.create(width)] * n_tasks)
            else:
                self.bn_sets.append([BNParams.create(width) for _ in range(n_tasks)])
        if self.head_mode == "shared":
            self.heads = [_affine(widths[-1], self.n_classes, rng)] * n_tasks
        else:
            self.heads = [_affine(widths[-1], self.n_classes, rng) for _ in range(n_tasks)]

    @property
    def n_tasks(self):
        return self.n_domains + 1

    @property
    def global_task(self):
        return self.n_domains

    def named_parameters(self):
        """Unique trainable tensors in a fixed order; aliased sets appear once."""
        out = []
        for k, (w, b) in enumerate(self.backbone):
            out += [(f"backbone.{k}.weight", w), (f"backbone.{k}.bias", b)]
        for site, sets in enumerate(self.bn_sets):
            for t, bn in enumerate(_unique(sets)):
                out += [(f"bn.{site}.{t}.gamma", bn.gamma), (f"bn.{site}.{t}.beta", bn.beta)]
        for t, (w, b) in enumerate(_unique(self.heads)):
            out += [(f"head.{t}.weight", w), (f"head.{t}.bias", b)]
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        """Copy of every parameter and running statistic, keyed by name."""
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for site, sets in enumerate(self.bn_sets):
            for t, bn in enumerate(_unique(sets)):
                state[f"bn.{site}.{t}.running_mean"] = bn.running_mean.copy()
                state[f"bn.{site}.{t}.running_var"] = bn.running_var.copy()
                state[f"bn.{site}.{t}.num_batches_tracked"] = np.array(bn.num_batches_tracked)
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        for name, value in state.items():
            if name in params:
                params[name].data = np.array(value, dtype=np.float64).reshape(params[name].shape)
        for site, sets in enumerate(self.bn_sets):
            for t, bn in enumerate(_unique(sets)):
                prefix = f"bn.{site}.{t}."
                bn.running_mean = np.array(state[prefix + "running_mean"], dtype=np.float64)
                bn.running_var = np.array(state[prefix + "running_var"], dtype=np.float64)
                bn.num_batches_tracked = int(state[prefix + "num_batches_tracked"])


def _unique(items):
    seen, out = set(), []
    for item in items:
        if id(item) not in seen:
            seen.add(id(item))
            out.append(item)
    return out


def forward_task(model, x, task, mode="train", update_stats=True):
    """Logits of one task for a B x D batch.

    In train mode every BN site normalizes with this batch's statistics only.
    """
    if not 0 <= task <= model.n_domains:
        raise IndexError(f"task {task} out of range 0..{model.n_domains}")
    h = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
    for (w, b), sets in zip(model.backbone, model.bn_sets):
        h = relu(bn_forward(linear(h, w, b), sets[task], mode, update_stats))
    w, b = model.heads[task]
    return linear(h, w, b)


def predict_all_tasks(model, x):
    """Eval-mode softmax outputs of all N+1 tasks.

    For one sample (shape [D]) returns the C x (N+1) prediction matrix whose
    column t belongs to task t; a batch [B, D] gives shape [B, C, N+1].
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    with no_grad():
        cols = [softmax(forward_task(model, xb, t, mode="eval").data)
                for t in range(model.n_tasks)]
    y = np.stack(cols, axis=2)
    return y[0] if single else y


# -- checkpoint ---------------------------------------------------------------
#
# JSON object: {"format", "meta": {dim, n_classes, n_domains, hidden, bn_mode,
# head_mode, seed}, "entries": {name: {"shape": [...], "values": [...]}}}.
# Aliased (shared) parameter sets are stored once under task index 0. Python's
# float repr round-trips exactly, so save/load is bit-exact.

def checkpoint_dict(model):
    meta = {
        "dim": model.dim, "n_classes": model.n_classes, "n_domains": model.n_domains,
        "hidden": list(model.hidden), "bn_mode": model.bn_mode,
        "head_mode": model.head_mode, "seed": model.seed,
    }
    entries = {}
    for name, value in model.state_dict().items():
        arr = np.asarray(value)
        entries[name] = {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}
    return {"format": CHECKPOINT_FORMAT, "meta": meta, "entries": entries}


def model_from_checkpoint(blob):
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format {blob.get('format')!r}")
    meta = dict(blob["meta"])
    meta["hidden"] = tuple(meta["hidden"])
    model = MultiTaskModel(**meta)
    state = {name: np.array(e["values"]).reshape(e["shape"]) for name, e in blob["entries"].items()}
    model.load_state_dict(state)
    return model


def save_checkpoint(model, path):
    Path(path).write_text(json.dumps(checkpoint_dict(model), indent=1))


def load_checkpoint(path):
    return model_from_checkpoint(json.loads(Path(path).read_text()))
