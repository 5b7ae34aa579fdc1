"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new ``Tensor`` that remembers its parents and a closure
mapping the output gradient to one gradient per parent. ``backward`` walks the
recorded graph once in reverse topological order. Gradients accumulate into
``.grad`` until ``sgd_step`` consumes and clears them.
"""

from __future__ import annotations

from contextlib import contextmanager
from numbers import Real

import numpy as np

from .errors import ContractError, DimensionError, NumericError


def _as_array(data):
    arr = np.array(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite value in tensor data")
    return arr


class Tensor:
    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op=""):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def relu(self):
        return relu(self)

    def backward(self):
        backward(self)


_recording = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (for inference)."""
    global _recording
    previous, _recording = _recording, False
    try:
        yield
    finally:
        _recording = previous


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op):
    """Build an op output; the graph edge is recorded only if a parent needs grads."""
    needs = _recording and any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, _op=op)
    return Tensor(data, _op=op)


def _is_scalar(t):
    return t.data.ndim == 0 or (t.data.size == 1 and t.data.ndim <= 1)


def _broadcast_pair(a, b, op):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return a, b
    raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}")


def _reduce_to(grad, shape):
    if grad.shape == shape:
        return grad
    return np.full(shape, grad.sum())


def add(a, b):
    a, b = _broadcast_pair(a, b, "add")

    def _bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result(a.data + b.data, (a, b), _bw, "add")


def sub(a, b):
    a, b = _broadcast_pair(a, b, "sub")

    def _bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _result(a.data - b.data, (a, b), _bw, "sub")


def mul(a, b):
    a, b = _broadcast_pair(a, b, "mul")

    def _bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), _bw, "mul")


def scale(a, c: Real):
    a = as_tensor(a)
    c = float(c)

    def _bw(g):
        return (g * c,)

    return _result(a.data * c, (a,), _bw, "scale")


def relu(a):
    a = as_tensor(a)
    # subgradient at exactly 0 is 0
    mask = a.data > 0

    def _bw(g):
        return (g * mask,)

    return _result(np.where(mask, a.data, 0.0), (a,), _bw, "relu")


def elementwise(kind, *args):
    """Dispatch by name: add, sub, mul (two operands), relu (one), scale (tensor, constant)."""
    ops = {"add": add, "sub": sub, "mul": mul, "relu": relu, "scale": scale}
    if kind not in ops:
        raise ContractError(f"unknown elementwise op {kind!r}")
    return ops[kind](*args)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")

    def _bw(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), _bw, "matmul")


def linear(x, weight, bias):
    """Affine map ``x @ weight + bias`` with the bias row broadcast over the batch."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: shapes {x.shape} and {weight.shape} do not align")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")

    def _bw(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _result(x.data @ weight.data + bias.data, (x, weight, bias), _bw, "linear")


def tensor_sum(a):
    a = as_tensor(a)

    def _bw(g):
        return (np.full(a.shape, float(g)),)

    return _result(a.data.sum(), (a,), _bw, "sum")


def tensor_mean(a):
    a = as_tensor(a)
    n = a.data.size

    def _bw(g):
        return (np.full(a.shape, float(g) / n),)

    return _result(a.data.mean(), (a,), _bw, "mean")


def batch_norm_train(x, gamma, beta, eps):
    """Normalize each column by its batch mean and (biased) variance, then apply gamma/beta.

    Returns ``(out, batch_mean, batch_var)``; the statistics are plain arrays.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 2:
        raise DimensionError(f"batch_norm: expected 2-d input, got {x.shape}")
    h = x.shape[1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise DimensionError("batch_norm: gamma/beta must match the feature width")
    n = x.shape[0]
    mean = x.data.mean(axis=0)
    centered = x.data - mean
    var = (centered**2).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def _bw(g):
        dxhat = g * gamma.data
        dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    out = _result(gamma.data * xhat + beta.data, (x, gamma, beta), _bw, "batch_norm_train")
    return out, mean, var


def batch_norm_eval(x, gamma, beta, mean, var, eps):
    """Normalize with fixed statistics; differentiable in ``x``, ``gamma`` and ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 2 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batch_norm: input {x.shape} vs gamma {gamma.shape}")
    inv_std = 1.0 / np.sqrt(np.asarray(var) + eps)
    xhat = (x.data - mean) * inv_std

    def _bw(g):
        return g * gamma.data * inv_std, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(gamma.data * xhat + beta.data, (x, gamma, beta), _bw, "batch_norm_eval")


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


def softmax_cross_entropy(logits, labels, weights=None):
    """Weighted mean cross-entropy over the active rows of a batch.

    ``labels`` is a B x C one-hot matrix; an all-zero row marks a masked sample.
    A row is active when its label row is non-empty and its weight is positive,
    and the loss is ``sum(w_i * CE_i) / n_active`` (0 when nothing is active).
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.data.ndim != 2 or labels.shape != logits.shape:
        raise DimensionError(f"cross-entropy: logits {logits.shape} vs labels {labels.shape}")
    b = logits.shape[0]
    w = np.ones(b) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (b,):
        raise DimensionError(f"cross-entropy: weights shape {w.shape} != ({b},)")
    if np.any(w < 0):
        raise ContractError("cross-entropy weights must be non-negative")
    active = (w > 0) & (labels.sum(axis=1) > 0)
    n_active = int(active.sum())
    logp = log_softmax(logits.data)
    if n_active == 0:
        return _result(0.0, (logits,), lambda g: (np.zeros(logits.shape),), "cross_entropy")
    coef = np.where(active, w, 0.0) / n_active
    per_row = -(labels * logp).sum(axis=1)
    loss = float((coef * per_row).sum())

    def _bw(g):
        p = np.exp(logp)
        row_mass = labels.sum(axis=1, keepdims=True)
        return (float(g) * coef[:, None] * (p * row_mass - labels),)

    return _result(loss, (logits,), _bw, "cross_entropy")


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every grad-requiring tensor upstream."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward() needs a scalar tensor")
    if not loss.requires_grad:
        return
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at op {node._op or 'leaf'}")
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def sgd_step(params, lr):
    """Plain gradient descent ``p <- p - lr * grad``; grads are cleared afterwards."""
    if lr < 0:
        raise ContractError("learning rate must be non-negative")
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractError("sgd_step: parameter has no gradient")
    for p in params:
        updated = p.data - lr * p.grad
        if not np.all(np.isfinite(updated)):
            raise NumericError("sgd_step produced a non-finite parameter")
        p.data = updated
        p.grad = None


def finite_diff_check(f, x, eps=1e-6):
    """Compare autograd against central differences.

    ``f`` maps a Tensor to a scalar Tensor and must be pure. Returns
    ``max_k |analytic_k - numeric_k| / max(1, |analytic_k|)``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    probe = Tensor(base, requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad
    worst = 0.0
    flat = base.reshape(-1)
    for k in range(flat.size):
        shifted = flat.copy()
        shifted[k] += eps
        hi = f(Tensor(shifted.reshape(base.shape))).item()
        shifted[k] -= 2 * eps
        lo = f(Tensor(shifted.reshape(base.shape))).item()
        numeric = (hi - lo) / (2 * eps)
        if not np.isfinite(numeric):
            raise NumericError("non-finite value in finite-difference probe")
        a = analytic.reshape(-1)[k]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
