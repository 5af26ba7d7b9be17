"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Graph` is an append-only tape.  Every call to :func:`op_apply`
computes a forward value eagerly, records a node whose inputs all have
smaller ids, and keeps a closure that maps the output gradient to input
gradients.  :meth:`Graph.backward` sweeps the tape in reverse.

Image tensors use the channels-last layout ``(N, H, W, C)``.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigurationError, ContractError, DimensionError, DomainError, NumericalError

MODES = ("train", "infer")

BATCHNORM_MOMENTUM = 0.99
BATCHNORM_EPS = 1e-5


class Tensor:
    """A value registered on a :class:`Graph`.

    ``grad`` is filled in by :meth:`Graph.backward` for every node reachable
    from the root that requires a gradient.
    """

    __slots__ = ("graph", "node_id", "values", "grad", "requires_grad", "__weakref__")

    def __init__(self, graph, node_id, values, requires_grad):
        self.graph = graph
        self.node_id = node_id
        self.values = values
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(id={self.node_id}, shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    kind: str
    inputs: tuple
    backward: Optional[Callable]
    requires_grad: bool


class Graph:
    """Single-writer differentiation tape.

    Not safe for concurrent mutation; build one graph per thread.  The graph
    refers to its tensors weakly so a finished step (and its cached forward
    buffers) is freed by reference counting alone.
    """

    def __init__(self):
        self.nodes = []
        self.tensors = []

    def __len__(self):
        return len(self.nodes)

    def tensor(self, values, requires_grad=False):
        """Register a leaf (input or parameter)."""
        arr = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericalError("leaf values must be finite")
        return self._append("leaf", (), arr, None, requires_grad)

    def _append(self, kind, inputs, value, backward, requires_grad):
        node_id = len(self.nodes)
        self.nodes.append(_Node(kind, inputs, backward, requires_grad))
        t = Tensor(self, node_id, value, requires_grad)
        self.tensors.append(weakref.ref(t))
        return t

    def backward(self, root):
        """Accumulate d(root)/d(node) for every node that requires a gradient.

        Returns a dict mapping node id to gradient array and also stores each
        gradient on the corresponding tensor's ``grad`` attribute.
        """
        if root.graph is not self:
            raise ContractError("root tensor belongs to a different graph")
        if root.values.size != 1 or root.values.ndim > 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        grads = {root.node_id: np.ones_like(root.values)}
        for node_id in range(root.node_id, -1, -1):
            g = grads.get(node_id)
            if g is None:
                continue
            node = self.nodes[node_id]
            t = self.tensors[node_id]()
            if t is not None:
                t.grad = g
            if not node.requires_grad and node_id != root.node_id:
                del grads[node_id]
            if node.backward is None:
                continue
            needs = tuple(self.nodes[i].requires_grad for i in node.inputs)
            input_grads = node.backward(g, needs)
            for i, need, ig in zip(node.inputs, needs, input_grads):
                if not need or ig is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + ig
                else:
                    grads[i] = ig
        return {k: v for k, v in grads.items() if self.nodes[k].requires_grad}


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b, kind):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- forward/backward rules ------------------------------------------------
# Each rule takes (input arrays, mode, params) and returns
# (output array, backward(g, needs) -> tuple of input grads).


def _matmul(vals, mode, params):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a @ b

    def backward(g, needs):
        return (g @ b.T if needs[0] else None, a.T @ g if needs[1] else None)

    return out, backward


def _add(vals, mode, params):
    a, b = vals
    _check_broadcast(a, b, "add")

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return a + b, backward


def _sub(vals, mode, params):
    a, b = vals
    _check_broadcast(a, b, "sub")

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return a - b, backward


def _mul(vals, mode, params):
    a, b = vals
    _check_broadcast(a, b, "mul")

    def backward(g, needs):
        return (_unbroadcast(g * b, a.shape) if needs[0] else None,
                _unbroadcast(g * a, b.shape) if needs[1] else None)

    return a * b, backward


def _sum(vals, mode, params):
    (a,) = vals

    def backward(g, needs):
        return (np.broadcast_to(g, a.shape).copy(),)

    return np.asarray(a.sum()), backward


def _square(vals, mode, params):
    (a,) = vals

    def backward(g, needs):
        return (2.0 * a * g,)

    return a * a, backward


def _relu(vals, mode, params):
    (x,) = vals
    mask = x > 0  # relu'(0) := 0

    def backward(g, needs):
        return (g * mask,)

    return np.where(mask, x, 0.0), backward


def _elu(vals, mode, params):
    (x,) = vals
    pos = x > 0
    neg_part = np.expm1(np.minimum(x, 0.0))
    out = np.where(pos, x, neg_part)

    def backward(g, needs):
        return (g * np.where(pos, 1.0, neg_part + 1.0),)

    return out, backward


def _sigmoid(vals, mode, params):
    (x,) = vals
    s = expit(x)

    def backward(g, needs):
        return (g * s * (1.0 - s),)

    return s, backward


def _linear(vals, mode, params):
    (x,) = vals

    def backward(g, needs):
        return (g,)

    return x, backward


def _softmax(vals, mode, params):
    (z,) = vals
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g, needs):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return p, backward


def _flatten(vals, mode, params):
    (x,) = vals
    if x.ndim < 2:
        raise DimensionError("flatten expects a leading batch axis")

    def backward(g, needs):
        return (g.reshape(x.shape),)

    return x.reshape(x.shape[0], int(np.prod(x.shape[1:]))), backward


def _reshape(vals, mode, params):
    (x,) = vals
    target = (x.shape[0],) + tuple(params["shape"])
    if int(np.prod(target)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {target}")

    def backward(g, needs):
        return (g.reshape(x.shape),)

    return x.reshape(target), backward


def _dropout(vals, mode, params):
    (x,) = vals
    rate = params.get("rate", 0.0)
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x, lambda g, needs: (g,)
    rng = params.get("rng")
    if rng is None:
        raise ContractError("train-mode dropout needs an 'rng' parameter")
    # inverted dropout: no rescaling needed at inference
    scale = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g, needs):
        return (g * scale,)

    return x * scale, backward


def _batchnorm(vals, mode, params):
    x, gamma, beta = vals
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm: scale/offset must have shape ({c},)")
    eps = params.get("eps", BATCHNORM_EPS)
    state = params.get("state")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if state is not None:
            m = params.get("momentum", BATCHNORM_MOMENTUM)
            state["mean"] = m * state["mean"] + (1.0 - m) * mean
            state["var"] = m * state["var"] + (1.0 - m) * var
    else:
        if state is None:
            raise ContractError("infer-mode batchnorm needs running statistics")
        mean, var = state["mean"], state["var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    out = gamma * xhat + beta
    count = x.size // c

    def backward(g, needs):
        dgamma = (g * xhat).sum(axis=axes) if needs[1] else None
        dbeta = g.sum(axis=axes) if needs[2] else None
        dx = None
        if needs[0]:
            dxhat = g * gamma
            if mode == "train":
                dx = inv / count * (count * dxhat - dxhat.sum(axis=axes)
                                    - xhat * (dxhat * xhat).sum(axis=axes))
            else:
                dx = dxhat * inv
        return dx, dgamma, dbeta

    return out, backward


def _conv2d(vals, mode, params):
    x, w = vals[0], vals[1]
    b = vals[2] if len(vals) > 2 else None
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects NHWC input and (kh, kw, cin, cout) kernel, got {x.shape}, {w.shape}")
    kh, kw, cin, cout = w.shape
    if x.shape[3] != cin:
        raise DimensionError(f"conv2d: input has {x.shape[3]} channels, kernel expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError("conv2d 'same' padding needs odd kernel sizes")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d: bias must have shape ({cout},)")
    n, h, wd, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (n, h, w, c, kh, kw)
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * wd, kh * kw * cin)
    wmat = w.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if b is not None:
        out += b
    out = out.reshape(n, h, wd, cout)

    def backward(g, needs):
        g2 = g.reshape(n * h * wd, cout)
        dx = dw = db = None
        if needs[0]:
            dcols = (g2 @ wmat.T).reshape(n, h, wd, kh, kw, cin)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + h, j:j + wd, :] += dcols[:, :, :, i, j, :]
            dx = dxp[:, ph:ph + h, pw:pw + wd, :]
        if needs[1]:
            dw = (cols.T @ g2).reshape(w.shape)
        if b is not None and needs[2]:
            db = g2.sum(axis=0)
        return (dx, dw, db) if b is not None else (dx, dw)

    return out, backward


def _maxpool2x2(vals, mode, params):
    (x,) = vals
    if x.ndim != 4:
        raise DimensionError("maxpool2x2 expects NHWC input")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    # np.argmax picks the first maximum: ties resolve in row-major window order
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g, needs):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        dx = gb.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (dx,)

    return out, backward


def _upsample2x2(vals, mode, params):
    (x,) = vals
    if x.ndim != 4:
        raise DimensionError("upsample2x2 expects NHWC input")
    n, h, w, c = x.shape
    out = x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(g, needs):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return out, backward


# -- losses ----------------------------------------------------------------


def _crossentropy(vals, mode, params):
    pred, target = vals
    if pred.shape != target.shape or pred.ndim != 2:
        raise DimensionError(f"crossentropy: prediction {pred.shape} vs target {target.shape}")
    n = pred.shape[0]
    if params.get("from_logits", False):
        z = pred - pred.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        logp = z - lse
        p = np.exp(logp)
        loss = -(target * logp).sum() / n

        def backward(g, needs):
            tsum = target.sum(axis=-1, keepdims=True)
            onehot = np.all((target == 0) | (target == tsum), axis=-1)
            dz = p * tsum - target
            # one-hot rows: evaluate the true-class entry as minus the mass on the
            # other classes, which stays accurate when p_true rounds to 1
            if onehot.any():
                hit = target != 0
                q = np.where(hit, 0.0, p)
                exact = tsum * (q - hit * q.sum(axis=-1, keepdims=True))
                dz = np.where(onehot[:, None], exact, dz)
            return (g * dz / n, None)

        return np.asarray(loss), backward

    safe = np.maximum(pred, np.finfo(np.float64).tiny)
    loss = -(target * np.log(safe)).sum() / n

    def backward(g, needs):
        dp = np.divide(-target, safe, out=np.zeros_like(pred), where=target != 0) / n
        return (g * dp, -g * np.log(safe) / n if needs[1] else None)

    return np.asarray(loss), backward


def _mse(vals, mode, params):
    pred, target = vals
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    loss = np.mean(diff * diff)

    def backward(g, needs):
        d = 2.0 * diff / diff.size * g
        return (d, -d if needs[1] else None)

    return np.asarray(loss), backward


def _cw_surrogate(vals, mode, params):
    z, labels = vals
    if z.ndim != 2:
        raise DimensionError("cw_surrogate expects (N, K) logits")
    labels = labels.astype(np.int64).reshape(-1)
    n, k = z.shape
    if labels.shape[0] != n:
        raise DimensionError(f"cw_surrogate: {n} logit rows but {labels.shape[0]} labels")
    if np.any(labels < 0) or np.any(labels >= k):
        raise DomainError(f"label index out of range [0, {k})")
    weights = np.asarray(params.get("weights", 1.0), dtype=np.float64) * np.ones(n)
    rows = np.arange(n)
    z_true = z[rows, labels]
    others = z.copy()
    others[rows, labels] = -np.inf
    runner_up = others.argmax(axis=1)
    margin = z_true - others[rows, runner_up]
    active = margin > 0
    per_sample = np.where(active, margin, 0.0)

    def backward(g, needs):
        dz = np.zeros_like(z)
        coef = g * weights * active
        dz[rows, labels] += coef
        dz[rows, runner_up] -= coef
        return (dz, None)

    return np.asarray((weights * per_sample).sum()), backward


_OPS = {
    "matmul": _matmul,
    "conv2d": _conv2d,
    "maxpool2x2": _maxpool2x2,
    "upsample2x2": _upsample2x2,
    "add": _add,
    "sub": _sub,
    "mul": _mul,
    "sum": _sum,
    "square": _square,
    "relu": _relu,
    "elu": _elu,
    "sigmoid": _sigmoid,
    "linear": _linear,
    "softmax": _softmax,
    "batchnorm": _batchnorm,
    "dropout": _dropout,
    "flatten": _flatten,
    "reshape": _reshape,
}

_LOSSES = {
    "categorical_crossentropy": _crossentropy,
    "mse": _mse,
    "cw_surrogate": _cw_surrogate,
}


def _record(kind, rule, inputs, mode, params):
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
    if not inputs:
        raise ContractError(f"{kind}: at least one input required")
    graph = inputs[0].graph
    if any(t.graph is not graph for t in inputs):
        raise ContractError(f"{kind}: inputs come from different graphs")
    with np.errstate(over="ignore", invalid="ignore"):
        out, backward = rule([t.values for t in inputs], mode, params)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"{kind} produced non-finite values")
    requires_grad = any(t.requires_grad for t in inputs)
    return graph._append(kind, tuple(t.node_id for t in inputs), out,
                         backward if requires_grad else None, requires_grad)


def op_apply(kind: str, inputs: Sequence[Tensor], mode: str = "infer", **params) -> Tensor:
    """Apply primitive ``kind`` to ``inputs`` and record it on their graph.

    ``mode`` selects train or infer behaviour for dropout and batchnorm.
    Extra keyword arguments are kind-specific (``rate``/``rng`` for dropout,
    ``state`` for batchnorm running statistics, ``shape`` for reshape).
    """
    rule = _OPS.get(kind)
    if rule is None:
        raise ConfigurationError(f"unsupported operation kind {kind!r}")
    return _record(kind, rule, list(inputs), mode, params)


def loss_eval(kind: str, prediction: Tensor, target, **params) -> Tensor:
    """Scalar loss node.

    ``target`` may be a Tensor or a plain array; arrays are registered as
    constants.  ``cw_surrogate`` takes logits and integer labels and returns
    the (optionally ``weights``-scaled) sum of per-sample margins
    ``max(Z_t - max_{i != t} Z_i, 0)``.
    """
    rule = _LOSSES.get(kind)
    if rule is None:
        raise ConfigurationError(f"unsupported loss kind {kind!r}")
    if not isinstance(target, Tensor):
        target = prediction.graph.tensor(target)
    return _record(kind, rule, [prediction, target], "infer", params)


def backward(root: Tensor) -> dict:
    """Gradients of scalar ``root`` w.r.t. every reachable tensor needing one."""
    return root.graph.backward(root)


def finite_difference_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at array ``x``.

    Test oracle only: costs two evaluations of ``f`` per element.
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def one_hot(labels, num_classes=10):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise DomainError(f"label index out of range [0, {num_classes})")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out
