"""Pseudo-label quality metrics, weighted empirical error, domain divergence
proxy and a numeric evaluator for the multi-source target-error bound.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import spearmanr

from .autograd import Tensor, linear, no_grad, relu, sgd_step, softmax_cross_entropy
from .errors import ContractError


@dataclass
class ConfusionStats:
    tp: np.ndarray
    tn: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def n_classes(self):
        return len(self.tp)


def confusion_stats(predicted, true, n_classes):
    predicted = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if predicted.shape != true.shape:
        raise ContractError("predicted and true labels differ in length")
    if predicted.size and (min(predicted.min(), true.min()) < 0
                           or max(predicted.max(), true.max()) >= n_classes):
        raise ContractError(f"class index outside 0..{n_classes - 1}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (true, predicted), 1)
    tp = np.diag(counts).copy()
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    tn = predicted.size - tp - fp - fn
    return ConfusionStats(tp, tn, fp, fn)


def _safe_ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def pseudo_label_metrics(audit, n_classes=None):
    """(Precision, Recall, macro-F1), all in percent, for (predicted, true) pairs.

    Precision is plain accuracy ``100 * N_c / N``; Recall and macro-F1 are the
    unweighted class means of per-class recall and F1. A class whose
    denominator is zero contributes 0.
    """
    audit = list(audit)
    if not audit:
        raise ContractError("empty pseudo-label audit")
    pred = np.array([p for p, _ in audit], dtype=np.int64)
    true = np.array([t for _, t in audit], dtype=np.int64)
    if n_classes is None:
        n_classes = int(max(pred.max(), true.max())) + 1
    stats = confusion_stats(pred, true, n_classes)
    precision = 100.0 * stats.tp.sum() / len(audit)
    rec_i = _safe_ratio(stats.tp, stats.tp + stats.fn)
    prec_i = _safe_ratio(stats.tp, stats.tp + stats.fp)
    f_i = _safe_ratio(2 * prec_i * rec_i, prec_i + rec_i)
    return float(precision), float(100.0 * rec_i.mean()), float(100.0 * f_i.mean())


def empirical_weighted_error(h, samples, alpha):
    """sum_j alpha_j * (0-1 error of ``h`` on sample set j).

    ``samples`` is a list of ``(X_j, y_j)``; ``h`` maps a feature batch to labels.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (len(samples),):
        raise ContractError(f"alpha has {alpha.size} weights for {len(samples)} domains")
    total = 0.0
    for a, (x, y) in zip(alpha, samples):
        y = np.asarray(y)
        if y.size == 0:
            raise ContractError("empty sample set")
        total += a * float(np.sum(np.asarray(h(x)) != y)) / y.size
    return total


# -- small MLP used by the divergence and lambda estimators --------------------

class MLPClassifier:
    """One-hidden-layer relu network fit by full-batch gradient descent.

    Inputs are standardized with the training-set statistics.
    """

    def __init__(self, n_classes, hidden=16, steps=300, lr=0.5, seed=0):
        self.n_classes = n_classes
        self.hidden = hidden
        self.steps = steps
        self.lr = lr
        self.seed = seed

    def n_parameters(self, dim):
        return dim * self.hidden + self.hidden + self.hidden * self.n_classes + self.n_classes

    def fit(self, x, y):
        rng = np.random.default_rng(self.seed)
        x = np.asarray(x, dtype=np.float64)
        self.mu_ = x.mean(axis=0)
        self.sd_ = np.where(x.std(axis=0) > 0, x.std(axis=0), 1.0)
        xs = (x - self.mu_) / self.sd_
        dim = x.shape[1]
        self.w1 = Tensor(rng.normal(scale=np.sqrt(2.0 / dim), size=(dim, self.hidden)), requires_grad=True)
        self.b1 = Tensor(np.zeros(self.hidden), requires_grad=True)
        self.w2 = Tensor(rng.normal(scale=np.sqrt(1.0 / self.hidden), size=(self.hidden, self.n_classes)),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(self.n_classes), requires_grad=True)
        onehot = np.eye(self.n_classes)[np.asarray(y, dtype=np.int64)]
        params = [self.w1, self.b1, self.w2, self.b2]
        for _ in range(self.steps):
            loss = softmax_cross_entropy(self._logits(xs), onehot)
            loss.backward()
            sgd_step(params, self.lr)
        return self

    def _logits(self, xs):
        return linear(relu(linear(Tensor(xs), self.w1, self.b1)), self.w2, self.b2)

    def predict(self, x):
        xs = (np.asarray(x, dtype=np.float64) - self.mu_) / self.sd_
        with no_grad():
            return self._logits(xs).data.argmax(axis=1)

    def error(self, x, y):
        return float(np.mean(self.predict(x) != np.asarray(y)))


def proxy_divergence(domain_a, domain_b, seed=0, hidden=16, steps=300, lr=0.5):
    """Proxy A-distance ``max(0, 2 (1 - 2 err))`` of a held-out domain discriminator.

    Each domain is shuffled and split in half; the discriminator trains on the
    first halves and ``err`` is its error on the second halves.
    """
    a = np.asarray(domain_a, dtype=np.float64)
    b = np.asarray(domain_b, dtype=np.float64)
    if len(a) < 4 or len(b) < 4:
        raise ContractError("proxy divergence needs at least 4 samples per domain")
    rng = np.random.default_rng(seed)
    a, b = a[rng.permutation(len(a))], b[rng.permutation(len(b))]
    ha, hb = len(a) // 2, len(b) // 2
    x_tr = np.concatenate([a[:ha], b[:hb]])
    y_tr = np.concatenate([np.zeros(ha, dtype=np.int64), np.ones(hb, dtype=np.int64)])
    x_te = np.concatenate([a[ha:], b[hb:]])
    y_te = np.concatenate([np.zeros(len(a) - ha, dtype=np.int64), np.ones(len(b) - hb, dtype=np.int64)])
    clf = MLPClassifier(2, hidden=hidden, steps=steps, lr=lr, seed=seed).fit(x_tr, y_tr)
    err = clf.error(x_te, y_te)
    return max(0.0, 2.0 * (1.0 - 2.0 * err))


def spearman(x, y):
    return float(spearmanr(x, y).statistic)


# -- target-error bound ---------------------------------------------------------

@dataclass
class BoundInputs:
    m: float
    alpha: list
    beta: list
    d: float
    delta: float
    lambdas: list
    divergences: list
    eps_target_star: float = 0.0

    def __post_init__(self):
        n = len(self.alpha)
        if not (len(self.beta) == len(self.lambdas) == len(self.divergences) == n) or n == 0:
            raise ContractError("alpha, beta, lambdas and divergences must have equal, non-zero length")
        if abs(sum(self.alpha) - 1.0) > 1e-9 or abs(sum(self.beta) - 1.0) > 1e-9:
            raise ContractError("alpha and beta must each sum to 1")
        if any(b * self.m < 1 for b in self.beta):
            raise ContractError("every domain needs m_j = beta_j * m >= 1")
        if self.d <= 0:
            raise ContractError("d must be positive")
        if any(v < 0 for v in self.divergences):
            raise ContractError("divergences must be non-negative")

    @property
    def n_domains(self):
        return len(self.alpha)


def _weights(inputs, uniform):
    n = inputs.n_domains
    if uniform:
        return np.full(n, 1.0 / n), np.full(n, 1.0 / n)
    return np.asarray(inputs.alpha, dtype=np.float64), np.asarray(inputs.beta, dtype=np.float64)


def bound_terms(inputs, uniform=False):
    """Itemized bound: target-minimizer error, complexity, lambda and divergence terms."""
    if not 0 < inputs.delta < 1:
        raise ContractError("delta must lie in (0, 1)")
    alpha, beta = _weights(inputs, uniform)
    m = float(inputs.m)
    weight_factor = float(np.sum(alpha**2 / beta))
    radicand = weight_factor * (inputs.d * math.log(2 * m) + math.log(2 / inputs.delta)) / (2 * m)
    return {
        "eps_target_star": float(inputs.eps_target_star),
        "complexity": 2.0 * math.sqrt(radicand),
        "lambda_term": float(np.sum(alpha * 2.0 * np.asarray(inputs.lambdas, dtype=np.float64))),
        "divergence_term": float(np.sum(alpha * np.asarray(inputs.divergences, dtype=np.float64))),
        "weight_factor": weight_factor,
    }


def bound_upper(inputs, uniform=False):
    t = bound_terms(inputs, uniform)
    return t["eps_target_star"] + t["complexity"] + t["lambda_term"] + t["divergence_term"]


def bound_report(inputs, uniform=False, notes=None):
    """JSON-ready report: echoed inputs, itemized terms and total.

    The confidence term uses ln(2/delta). The variant with ln(delta) in its
    place is reported alongside because it can turn the radicand negative.
    """
    terms = bound_terms(inputs, uniform)
    alpha, beta = _weights(inputs, uniform)
    m = float(inputs.m)
    alt = terms["weight_factor"] * (inputs.d * math.log(2 * m) + math.log(inputs.delta)) / (2 * m)
    report = {
        "inputs": asdict(inputs),
        "uniform": bool(uniform),
        "effective_alpha": alpha.tolist(),
        "effective_beta": beta.tolist(),
        "terms": {k: v for k, v in terms.items() if k != "weight_factor"},
        "weight_factor": terms["weight_factor"],
        "total": bound_upper(inputs, uniform),
        "confidence_log_term": "ln(2/delta)",
        "ln_delta_variant": {
            "radicand": alt,
            "radicand_negative": alt < 0,
            "complexity": 2.0 * math.sqrt(alt) if alt >= 0 else None,
        },
    }
    if notes:
        report["notes"] = notes
    return report


def estimate_lambda(x_source, y_source, x_target, y_target, n_classes, seed=0):
    """Joint-error estimate: fit one classifier on source and target together and
    return the sum of its two error rates (an optimistic plug-in, not a minimum)."""
    x = np.concatenate([x_source, x_target])
    y = np.concatenate([y_source, y_target])
    clf = MLPClassifier(n_classes, hidden=32, steps=400, lr=0.5, seed=seed).fit(x, y)
    return clf.error(x_source, y_source) + clf.error(x_target, y_target)


def estimate_bound_inputs(dataset, target, delta=0.05, seed=0):
    """Plug-in BoundInputs for a leave-one-out split of a generated dataset.

    Sources are every domain except ``target``; alpha and beta are set from
    the labeled counts, ``d`` is the discriminator's parameter count.
    """
    sources = [j for j in range(dataset.n_domains) if j != target]
    counts = np.array([len(dataset.domains[j].labeled_y) for j in sources], dtype=np.float64)
    m = float(counts.sum())
    beta = (counts / m).tolist()
    alpha = [1.0 / len(sources)] * len(sources)
    xt, yt = dataset.all_features(target), dataset.all_labels(target)
    lambdas, divs = [], []
    for j in sources:
        xs, ys = dataset.all_features(j), dataset.all_labels(j)
        lambdas.append(estimate_lambda(xs, ys, xt, yt, dataset.n_classes, seed=seed))
        divs.append(proxy_divergence(xs, xt, seed=seed))
    star = MLPClassifier(dataset.n_classes, hidden=32, steps=400, lr=0.5, seed=seed).fit(xt, yt)
    d = MLPClassifier(2).n_parameters(dataset.dim)
    return BoundInputs(m=m, alpha=alpha, beta=beta, d=float(d), delta=delta,
                       lambdas=lambdas, divergences=divs,
                       eps_target_star=star.error(xt, yt))
