"""Multi-task pseudo-label training loop and its FixMatch-style baseline.

One iteration draws an equal number of labeled and unlabeled samples from
every source domain, trains each labeled sample through its own domain's task
and every labeled sample through the global task, pseudo-labels weak views of
the unlabeled samples with the configured fusion rule, and trains strong views
of the confident ones through the same two paths. The summed loss gets one
backward pass and one SGD step.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, fields

import numpy as np

from .autograd import Tensor, backward, sgd_step, softmax_cross_entropy
from .config import ExperimentConfig
from .data import MultiDomainDataset, augment, generate
from .errors import ContractError, NumericError
from .fusion import TEST_RULES, batch_pseudo_labels, batch_test_predict
from .metrics import pseudo_label_metrics
from .model import MultiTaskModel, forward_task, predict_all_tasks

log = logging.getLogger(__name__)


@dataclass
class Batch:
    labeled_x: list  # per source domain, B_l x D
    labeled_y: list
    unlabeled_x: list  # per source domain, B_u x D


@dataclass
class PseudoLabelAudit:
    domain: np.ndarray
    predicted: np.ndarray
    confidence: np.ndarray
    retained: np.ndarray
    hidden: np.ndarray | None = None  # filled from the oracle, never used in a loss


@dataclass
class MetricsRecord:
    epoch: int
    iteration: int
    sup_loss: float
    unsup_loss: float
    mask_rate: float
    pl_precision: float
    pl_recall: float
    pl_macro_f1: float
    domain_acc: list
    target_acc: float

    def row(self):
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "domain_acc"}
        out.pop("target_acc")
        for j, acc in enumerate(self.domain_acc):
            out[f"acc_domain_{j}"] = acc
        out["target_acc"] = self.target_acc
        return out


@dataclass
class TrainState:
    model: MultiTaskModel
    iteration: int = 0
    history: list = field(default_factory=list)


def _sample(n, k, rng):
    if n == 0:
        raise ContractError("cannot draw a batch from an empty domain")
    return rng.choice(n, size=k, replace=n < k)


def make_batch(dataset, config, rng):
    """Draw ``batch_labeled`` labeled and ``batch_unlabeled`` unlabeled samples per domain.

    Sampling is uniform, without replacement unless the domain is too small.
    Returns the batch and the hidden labels of the unlabeled part.
    """
    lx, ly, ux, hidden = [], [], [], []
    for j, d in enumerate(dataset.domains):
        li = _sample(len(d.labeled_y), config.batch_labeled, rng)
        ui = _sample(len(d.unlabeled_x), config.batch_unlabeled, rng)
        lx.append(d.labeled_x[li])
        ly.append(d.labeled_y[li])
        ux.append(d.unlabeled_x[ui])
        hidden.append(dataset.oracle[j][ui])
    return Batch(lx, ly, ux), hidden


def _onehot(labels, n_classes):
    return np.eye(n_classes)[np.asarray(labels, dtype=np.int64)]


def _task_loss(model, x, labels, task):
    """CE of one task's path; a single sample falls back to running BN statistics."""
    mode = "train" if len(x) >= 2 else "eval"
    logits = forward_task(model, x, task, mode=mode)
    return softmax_cross_entropy(logits, _onehot(labels, model.n_classes))


def supervised_loss(model, batch):
    n = model.n_domains
    loss = Tensor(0.0)
    for i in range(n):
        loss = loss + _task_loss(model, batch.labeled_x[i], batch.labeled_y[i], i)
    all_x = np.concatenate(batch.labeled_x)
    all_y = np.concatenate(batch.labeled_y)
    return loss + _task_loss(model, all_x, all_y, model.global_task)


def supervised_step(model, batch):
    """Supervised loss for one batch; gradients are accumulated into the parameters."""
    loss = supervised_loss(model, batch)
    backward(loss)
    return loss.item()


def augment_views(batch, config, donor_stats, rng):
    """Weak and strong views of every unlabeled sample.

    The donor statistics for strong views come from a uniformly chosen other
    source domain (the sample's own domain when there is only one).
    """
    weak, strong = [], []
    n = len(batch.unlabeled_x)
    for i, x in enumerate(batch.unlabeled_x):
        weak.append(augment(x, config.weak_aug, seed=rng))
        others = [k for k in range(n) if k != i] or [i]
        donors = rng.choice(others, size=len(x))
        mu = np.stack([donor_stats[k][0] for k in donors])
        sd = np.stack([donor_stats[k][1] for k in donors])
        strong.append(augment(x, config.strong_aug, donor_stats=(mu, sd), seed=rng))
    return weak, strong


def unsupervised_loss(model, weak, strong, config):
    """Pseudo-label loss from precomputed weak/strong views.

    Only retained samples enter the strong forward passes, so a discarded
    sample influences neither the loss nor the batch statistics.
    """
    n = model.n_domains
    loss = Tensor(0.0)
    kept_x, kept_y = [], []
    audit = {"domain": [], "predicted": [], "confidence": [], "retained": []}
    # eval-mode predictions do not depend on batch composition: one pass for all domains
    y_all = predict_all_tasks(model, np.concatenate(weak))
    bounds = np.cumsum([0] + [len(w) for w in weak])
    for i in range(n):
        y = y_all[bounds[i]:bounds[i + 1]]
        cls, conf, keep = batch_pseudo_labels(y, i, config.scheme, config.tau)
        audit["domain"].append(np.full(len(cls), i))
        audit["predicted"].append(cls)
        audit["confidence"].append(conf)
        audit["retained"].append(keep)
        if keep.any():
            loss = loss + _task_loss(model, strong[i][keep], cls[keep], i)
            kept_x.append(strong[i][keep])
            kept_y.append(cls[keep])
    if kept_x:
        loss = loss + _task_loss(model, np.concatenate(kept_x), np.concatenate(kept_y),
                                 model.global_task)
    return loss, PseudoLabelAudit(**{k: np.concatenate(v) for k, v in audit.items()})


def unsupervised_step(model, batch, config, rng, donor_stats, hidden=None):
    """Augment, pseudo-label and accumulate the unsupervised gradients of one batch."""
    weak, strong = augment_views(batch, config, donor_stats, rng)
    loss, audit = unsupervised_loss(model, weak, strong, config)
    if hidden is not None:
        audit.hidden = np.concatenate(hidden)
    backward(loss * config.unsup_weight)
    return loss.item(), audit


def build_model(config):
    return MultiTaskModel(
        dim=config.dim, n_classes=config.n_classes, n_domains=config.n_domains,
        hidden=(config.hidden,) * config.depth, bn_mode=config.bn_mode,
        head_mode=config.head_mode, seed=_seeds(config.seed)[0],
    )


def _seeds(seed):
    """Independent integer seeds for model init and the data stream."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(2)]


def make_dataset(config):
    return generate(config.seed, config.n_domains + 1, config.n_classes, config.dim,
                    config.labels_per_class, config.unlabeled_per_class, config.shift_strength)


def split_domains(dataset, config):
    """(sources, target) for leave-one-domain-out; sources keep their relative order."""
    if dataset.n_domains != config.n_domains + 1:
        raise ContractError(f"dataset has {dataset.n_domains} domains, config expects "
                            f"{config.n_domains} sources + 1 target")
    target = config.target
    sources = [j for j in range(dataset.n_domains) if j != target]
    return dataset.subset(sources), dataset.subset([target])


def evaluate(model, sources, target, test_rule):
    """Per-source accuracy of the domain's own task and target accuracy under ``test_rule``."""
    domain_acc = []
    for i in range(sources.n_domains):
        y = predict_all_tasks(model, sources.all_features(i))
        domain_acc.append(float(np.mean(y[:, :, i].argmax(axis=1) == sources.all_labels(i))))
    yt = predict_all_tasks(model, target.all_features(0))
    target_acc = float(np.mean(batch_test_predict(yt, test_rule) == target.all_labels(0)))
    return domain_acc, target_acc


def target_accuracy_by_rule(model, target):
    yt = predict_all_tasks(model, target.all_features(0))
    truth = target.all_labels(0)
    return {rule: float(np.mean(batch_test_predict(yt, rule) == truth)) for rule in TEST_RULES}


def final_pseudo_label_audit(model, sources, config):
    """Pseudo-label quality on every source domain's full unlabeled pool (clean inputs)."""
    pairs = []
    for i in range(sources.n_domains):
        y = predict_all_tasks(model, sources.domains[i].unlabeled_x)
        cls, _, _ = batch_pseudo_labels(y, i, config.scheme, config.tau)
        pairs.extend(zip(cls.tolist(), sources.oracle[i].tolist()))
    return pseudo_label_metrics(pairs, n_classes=config.n_classes)


def train(config, dataset=None, on_epoch=None):
    """Run the full loop; returns the final TrainState.

    ``dataset`` must contain N+1 domains; the target is held out entirely.
    Raises NumericError (with ``.iteration``) on a non-finite loss.
    """
    if dataset is None:
        dataset = make_dataset(config)
    sources, target = split_domains(dataset, config)
    state = TrainState(build_model(config))
    model = state.model
    rng = np.random.default_rng(_seeds(config.seed)[1])
    donor_stats = [sources.feature_stats(j) for j in range(sources.n_domains)]
    window = _EpochWindow()
    for it in range(config.max_iter):
        try:
            # overflow surfaces as a NumericError from the finiteness checks instead
            with np.errstate(over="ignore", invalid="ignore"):
                batch, hidden = make_batch(sources, config, rng)
                sup = supervised_loss(model, batch)
                weak, strong = augment_views(batch, config, donor_stats, rng)
                unsup, audit = unsupervised_loss(model, weak, strong, config)
                backward(sup + unsup * config.unsup_weight)
                sgd_step([p for p in model.parameters() if p.grad is not None], config.lr)
        except NumericError as exc:
            raise NumericError(f"training diverged at iteration {it}: {exc}", iteration=it) from exc
        audit.hidden = np.concatenate(hidden)
        window.add(sup.item(), unsup.item(), audit)
        state.iteration = it + 1
        if state.iteration % config.epoch_iters == 0 or state.iteration == config.max_iter:
            domain_acc, target_acc = evaluate(model, sources, target, config.test_rule)
            record = window.close(len(state.history) + 1, state.iteration, config.n_classes,
                                  domain_acc, target_acc)
            state.history.append(record)
            log.debug("epoch %d: %s", record.epoch, record)
            if on_epoch is not None:
                on_epoch(record)
    return state


class _EpochWindow:
    def __init__(self):
        self.reset()

    def reset(self):
        self.sup, self.unsup, self.audits = [], [], []

    def add(self, sup, unsup, audit):
        self.sup.append(sup)
        self.unsup.append(unsup)
        self.audits.append(audit)

    def close(self, epoch, iteration, n_classes, domain_acc, target_acc):
        pred = np.concatenate([a.predicted for a in self.audits])
        hidden = np.concatenate([a.hidden for a in self.audits])
        kept = np.concatenate([a.retained for a in self.audits])
        p, r, f = pseudo_label_metrics(zip(pred.tolist(), hidden.tolist()), n_classes=n_classes)
        record = MetricsRecord(epoch, iteration, float(np.mean(self.sup)), float(np.mean(self.unsup)),
                               float(kept.mean()), p, r, f, domain_acc, target_acc)
        self.reset()
        return record


def history_csv(history):
    """Metrics history as CSV text; floats use repr so reruns are byte-identical."""
    buf = io.StringIO()
    rows = [rec.row() for rec in history]
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else [], lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def summarize(state, config, dataset):
    sources, target = split_domains(dataset, config)
    model = state.model
    p, r, f = final_pseudo_label_audit(model, sources, config)
    by_rule = target_accuracy_by_rule(model, target)
    last = state.history[-1]
    return {
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "target_domain": config.target,
        "train_rule": config.train_rule,
        "test_rule": config.test_rule,
        "bn_mode": config.bn_mode,
        "head_mode": config.head_mode,
        "iterations": state.iteration,
        "final_pl_precision": p,
        "final_pl_recall": r,
        "final_pl_macro_f1": f,
        "domain_acc": last.domain_acc,
        "target_acc": by_rule[config.test_rule],
        "target_acc_by_rule": by_rule,
    }


def fully_supervised(dataset):
    """Copy of ``dataset`` where every unlabeled sample is labeled with its hidden label."""
    from .data import DomainData

    doms = []
    for j, d in enumerate(dataset.domains):
        x = np.concatenate([d.labeled_x, d.unlabeled_x])
        y = np.concatenate([d.labeled_y, dataset.oracle[j]])
        doms.append(DomainData(j, x, y, d.unlabeled_x))
    return MultiDomainDataset(dataset.n_classes, dataset.dim, doms, dataset.oracle,
                              dataset.specs, dataset.prototypes, dataset.basis)
