"""Untargeted l2 attacks: normalised-gradient FGS, DeepFool and Carlini-Wagner.

All gradients are taken with the source model in infer mode.  Every attack
returns an :class:`AdversarialBatch` whose ``norms`` equal the per-sample
l2 distance between ``perturbed`` and ``clean``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logit

from .autodiff import Graph, loss_eval, one_hot, op_apply
from .errors import AttackError, ConfigurationError, ContractError, NumericalError

log = logging.getLogger(__name__)

ALGORITHMS = ("fgs", "deepfool", "cw")
ZERO_GRAD = 1e-12  # DeepFool treats smaller ||w'|| as no usable direction
CW_CLAMP = 1e-6  # inputs clamped to [d, 1 - d] before inverting the sigmoid
CW_W_LIMIT = 20.0  # keeps sigmoid(w) strictly inside (0, 1) in float64


@dataclass(frozen=True)
class AttackConfig:
    algorithm: str
    epsilon: float = 2.5
    # DeepFool
    max_iterations: int = 50
    overshoot: float = 0.02
    canonical_ratio: bool = False
    # Carlini-Wagner
    binary_search_steps: int = 4
    cw_max_iterations: int = 60
    learning_rate: float = 0.1
    batch_size: int = 10
    initial_const: float = 1.0
    abort_early: bool = True
    random_starts: int = 3
    start_noise: float = 0.1
    # shared
    clip: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown attack algorithm {self.algorithm!r}")
        if not self.epsilon > 0:
            raise ContractError("epsilon must be positive")
        if self.max_iterations < 1 or self.cw_max_iterations < 1:
            raise ContractError("max iterations must be at least 1")
        if self.binary_search_steps < 1:
            raise ContractError("binary search steps must be at least 1")
        if not self.initial_const > 0:
            raise ContractError("initial constant must be positive")
        if self.random_starts < 1 or self.batch_size < 1:
            raise ContractError("random starts and batch size must be at least 1")
        if self.overshoot < 0:
            raise ContractError("overshoot must be non-negative")

    def to_dict(self):
        """Only the fields relevant to the algorithm, for provenance and cache keys."""
        d = asdict(self)
        keep = {"algorithm", "clip", "seed"}
        keep |= {"fgs": {"epsilon"},
                 "deepfool": {"max_iterations", "overshoot", "canonical_ratio"},
                 "cw": {"binary_search_steps", "cw_max_iterations", "learning_rate", "batch_size",
                        "initial_const", "abort_early", "random_starts", "start_noise"}}[self.algorithm]
        return {k: v for k, v in d.items() if k in keep}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def label(self):
        return f"fgs(eps={self.epsilon:g})" if self.algorithm == "fgs" else self.algorithm


CW_MNIST = dict(binary_search_steps=4, cw_max_iterations=60, learning_rate=0.1, batch_size=10,
                initial_const=1.0, abort_early=True)
CW_CIFAR = dict(binary_search_steps=6, cw_max_iterations=10000, learning_rate=0.7, batch_size=25,
                initial_const=0.001, abort_early=True)
FGS_EPSILON = {"mnist-fc": 2.5, "mnist-cnn": 1.5, "cifar-cnn": 1.7}


@dataclass
class AdversarialBatch:
    clean: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray
    source: str
    algorithm: str
    success: np.ndarray
    norms: np.ndarray = None
    config: dict = field(default_factory=dict)
    # per-sample diagnostics; zero-gradient (FGS), degenerate (DeepFool), failure (CW)
    flags: Optional[np.ndarray] = None
    iterations: Optional[np.ndarray] = None
    const: Optional[np.ndarray] = None
    probe_log: Optional[list] = None

    def __post_init__(self):
        if self.clean.shape != self.perturbed.shape:
            raise ContractError("clean and perturbed images differ in shape")
        if self.norms is None:
            self.norms = l2_norms(self.perturbed - self.clean)

    def __len__(self):
        return self.clean.shape[0]

    @property
    def success_rate(self):
        return float(self.success.mean()) if len(self) else 0.0


def l2_norms(delta):
    flat = delta.reshape(delta.shape[0], int(np.prod(delta.shape[1:])))
    return np.sqrt((flat ** 2).sum(axis=1))


def _labels(y, n):
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ContractError(f"{n} images but {y.shape[0]} labels")
    return y


def loss_gradient(model, x, y, batch_size=500):
    """Per-sample gradient of the crossentropy loss w.r.t. the input."""
    grads = np.empty_like(x)
    for start in range(0, x.shape[0], batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        g = Graph()
        xt = g.tensor(xb, requires_grad=True)
        fw = model.forward(g, xt)
        loss = loss_eval("categorical_crossentropy", fw.logits, one_hot(yb, fw.logits.shape[1]), from_logits=True)
        g.backward(loss)
        # the loss is a batch mean; rescale to per-sample gradients
        grads[start:start + batch_size] = xt.grad * xb.shape[0]
    return grads


def _misclassified(model, x, y, batch_size=500):
    return model.logits(x, batch_size).argmax(axis=1) != y


def fgs_attack(model, x, y, cfg):
    """x + eps * grad / ||grad||_2 per sample, gradient of the crossentropy loss."""
    if cfg.algorithm != "fgs":
        raise ConfigurationError("fgs_attack needs an fgs config")
    x = np.asarray(x, dtype=np.float64)
    y = _labels(y, x.shape[0])
    grad = loss_gradient(model, x, y)
    # confident samples have gradients near 1e-15 that still point somewhere;
    # dividing by the peak first keeps the norm clear of underflow
    peak = np.abs(grad).reshape(grad.shape[0], -1).max(axis=1, initial=0.0)
    zero = ~(np.isfinite(peak) & (peak > 0))
    bshape = (-1,) + (1,) * (x.ndim - 1)
    unit = grad / np.where(zero, 1.0, peak).reshape(bshape)
    scale = np.where(zero, 0.0, cfg.epsilon / np.where(zero, 1.0, l2_norms(unit)))
    adv = x + np.where(zero.reshape(bshape), 0.0, unit * scale.reshape(bshape))
    if cfg.clip:
        adv = np.clip(adv, 0.0, 1.0)
    return AdversarialBatch(x, adv, y, model.name, "fgs", _misclassified(model, adv, y),
                            config=cfg.to_dict(), flags=zero)


def logits_and_jacobian(model, x):
    """Logits Z (N, K) and dZ_k/dx stacked as (N, K, *input_shape)."""
    g = Graph()
    xt = g.tensor(x, requires_grad=True)
    z = model.forward(g, xt).logits
    k = z.shape[1]
    jac = np.empty((x.shape[0], k) + x.shape[1:])
    for cls in range(k):
        mask = np.zeros(z.shape)
        mask[:, cls] = 1.0
        root = op_apply("sum", [op_apply("mul", [z, g.tensor(mask)])])
        jac[:, cls] = g.backward(root)[xt.node_id]
    return z.values, jac


def deepfool_attack(model, x, cfg, y=None, chunk=100):
    """Iterated linearised minimal-l2 steps toward the nearest class boundary.

    Logits play the role of the per-class scores.  ``y`` gives the reference
    labels; without it the model's own predictions on ``x`` are used.  A
    sample stops once the model no longer predicts its reference label, or
    after ``cfg.max_iterations`` steps.
    """
    if cfg.algorithm != "deepfool":
        raise ConfigurationError("deepfool_attack needs a deepfool config")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    ref = model.logits(x).argmax(axis=1) if y is None else _labels(y, n)
    adv = x.copy()
    r_tot = np.zeros_like(x)
    iterations = np.zeros(n, dtype=np.int64)
    degenerate = np.zeros(n, dtype=bool)
    done = model.logits(x).argmax(axis=1) != ref
    power = 1.0 if cfg.canonical_ratio else 2.0
    for _ in range(cfg.max_iterations):
        active = np.flatnonzero(~done & ~degenerate)
        if active.size == 0:
            break
        for start in range(0, active.size, chunk):
            idx = active[start:start + chunk]
            z, jac = logits_and_jacobian(model, adv[idx])
            rows = np.arange(idx.size)
            t = ref[idx]
            f_diff = z - z[rows, t][:, None]
            w_diff = jac - jac[rows, t][:, None]
            w_norm = np.sqrt((w_diff.reshape(idx.size, z.shape[1], -1) ** 2).sum(axis=2))
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.abs(f_diff) / w_norm ** power
            ratio[rows, t] = np.inf
            ratio[w_norm < ZERO_GRAD] = np.inf
            best = ratio.argmin(axis=1)
            bad = ~np.isfinite(ratio[rows, best])
            degenerate[idx[bad]] = True
            ok = ~bad
            if not ok.any():
                continue
            sel, l = idx[ok], best[ok]
            wl = w_diff[rows[ok], l]
            fl = np.abs(f_diff[rows[ok], l])
            nl = w_norm[rows[ok], l]
            step = wl * (fl / nl ** 2).reshape((-1,) + (1,) * (x.ndim - 1))
            r_tot[sel] += step
            cand = x[sel] + (1.0 + cfg.overshoot) * r_tot[sel]
            adv[sel] = np.clip(cand, 0.0, 1.0) if cfg.clip else cand
            iterations[sel] += 1
            done[sel] = model.logits(adv[sel]).argmax(axis=1) != ref[sel]
    success = model.logits(adv).argmax(axis=1) != ref
    return AdversarialBatch(x, adv, ref, model.name, "deepfool", success, config=cfg.to_dict(),
                            flags=degenerate, iterations=iterations)


class _Adam:
    def __init__(self, lr, shape, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = np.zeros(shape[0])

    def step(self, w, g, live):
        mask = live.reshape((-1,) + (1,) * (w.ndim - 1))
        self.t += live
        self.m = np.where(mask, self.b1 * self.m + (1 - self.b1) * g, self.m)
        self.v = np.where(mask, self.b2 * self.v + (1 - self.b2) * g * g, self.v)
        t = np.maximum(self.t, 1).reshape(mask.shape)
        mhat = self.m / (1 - self.b1 ** t)
        vhat = self.v / (1 - self.b2 ** t)
        return np.where(mask, w - self.lr * mhat / (np.sqrt(vhat) + self.eps), w)


def _cw_objective(model, w, x, y, c):
    """Per-sample (margin, squared distance, misclassified) and the gradient w.r.t. w."""
    g = Graph()
    wt = g.tensor(w, requires_grad=True)
    xp = op_apply("sigmoid", [wt])
    z = model.forward(g, xp).logits
    margin = loss_eval("cw_surrogate", z, y, weights=c)
    dist = op_apply("sum", [op_apply("square", [op_apply("sub", [xp, g.tensor(x)])])])
    total = op_apply("add", [margin, dist])
    g.backward(total)
    zv = z.values
    rows = np.arange(y.size)
    others = zv.copy()
    others[rows, y] = -np.inf
    per_margin = np.maximum(zv[rows, y] - others.max(axis=1), 0.0)
    per_dist = ((xp.values - x) ** 2).reshape(y.size, -1).sum(axis=1)
    wrong = zv.argmax(axis=1) != y
    return per_margin, per_dist, wrong, wt.grad, xp.values


def _cw_descent(model, w0, x, y, c, cfg):
    """One gradient-descent run; returns best successful (dist, adv) per sample."""
    n = y.size
    opt = _Adam(cfg.learning_rate, w0.shape)
    w = w0.copy()
    best_dist = np.full(n, np.inf)
    best_adv = x.copy()
    live = np.ones(n, dtype=bool)
    prev = np.full(n, np.inf)
    check = max(1, int(np.ceil(cfg.cw_max_iterations * 0.1)))
    for it in range(cfg.cw_max_iterations + 1):
        margin, dist, wrong, grad, xp = _cw_objective(model, w, x, y, c)
        improved = wrong & (dist < best_dist)
        best_dist = np.where(improved, dist, best_dist)
        best_adv[improved] = xp[improved]
        if it == cfg.cw_max_iterations:
            break
        loss = c * margin + dist
        if cfg.abort_early and it > 0 and it % check == 0:
            live &= ~(loss > prev * (1.0 - 1e-4))
            prev = np.where(live, loss, prev)
            if not live.any():
                break
        elif it == 0:
            prev = loss
        w = np.clip(opt.step(w, grad, live), -CW_W_LIMIT, CW_W_LIMIT)
    return best_dist, best_adv


def cw_attack(model, x, y, cfg):
    """Carlini-Wagner l2 attack in sigmoid space with a binary search over c.

    For each sample the search probes ``cfg.binary_search_steps`` values of c
    (doubling while every probe fails, bisecting once one succeeds).  Each
    probe runs ``cfg.random_starts`` descents: the first from sigmoid^-1(x),
    the rest with Gaussian noise added in w-space.  The result is the
    successful iterate of minimal l2 distance; ``const`` holds the smallest
    successful c and ``probe_log`` every (c, success, best distance) probe.
    Samples with no success keep the clean input.
    """
    if cfg.algorithm != "cw":
        raise ConfigurationError("cw_attack needs a cw config")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    y = _labels(y, n)
    rng = np.random.default_rng(cfg.seed)
    adv = x.copy()
    const = np.full(n, np.nan)
    failure = np.zeros(n, dtype=bool)
    probe_log = [[] for _ in range(n)]
    for start in range(0, n, cfg.batch_size):
        sl = slice(start, start + cfg.batch_size)
        xb, yb = x[sl], y[sl]
        m = yb.size
        w0 = logit(np.clip(xb, CW_CLAMP, 1.0 - CW_CLAMP))
        noises = [np.zeros_like(w0)] + [rng.normal(0.0, cfg.start_noise, size=w0.shape)
                                        for _ in range(cfg.random_starts - 1)]
        lower = np.zeros(m)
        upper = np.full(m, np.inf)
        c = np.full(m, cfg.initial_const)
        best_dist = np.full(m, np.inf)
        best_adv = xb.copy()
        finite_any = np.zeros(m, dtype=bool)
        for _ in range(cfg.binary_search_steps):
            step_dist = np.full(m, np.inf)
            for noise in noises:
                try:
                    d, a = _cw_descent(model, w0 + noise, xb, yb, c, cfg)
                except NumericalError:
                    log.warning("non-finite CW loss; moving to the next start")
                    continue
                finite_any[:] = True
                better = d < step_dist
                step_dist = np.where(better, d, step_dist)
                improved = better & (d < best_dist)
                best_dist = np.where(improved, d, best_dist)
                best_adv[improved] = a[improved]
            ok = np.isfinite(step_dist)
            for i in range(m):
                probe_log[start + i].append((float(c[i]), bool(ok[i]),
                                             float(np.sqrt(step_dist[i])) if ok[i] else None))
            upper = np.where(ok, np.minimum(upper, c), upper)
            lower = np.where(ok, lower, np.maximum(lower, c))
            c = np.where(np.isfinite(upper), (lower + upper) / 2.0, c * 2.0)
        adv[sl] = best_adv
        failure[sl] = ~finite_any
        for i in range(m):
            hits = [p[0] for p in probe_log[start + i] if p[1]]
            if hits:
                const[start + i] = min(hits)
    success = ~np.isnan(const)
    adv[~success] = x[~success]
    return AdversarialBatch(x, adv, y, model.name, "cw", success, config=cfg.to_dict(),
                            flags=failure, const=const, probe_log=probe_log)


_DISPATCH = {
    "fgs": lambda model, x, y, cfg: fgs_attack(model, x, y, cfg),
    "deepfool": lambda model, x, y, cfg: deepfool_attack(model, x, cfg, y=y),
    "cw": lambda model, x, y, cfg: cw_attack(model, x, y, cfg),
}


def run_attack(model, x, y, cfg):
    return _DISPATCH[cfg.algorithm](model, x, y, cfg)


def generate_attack_suite(models, algorithms, x, y):
    """One AdversarialBatch per (algorithm, model), algorithm-major order."""
    if not models or not algorithms:
        raise ContractError("attack suite needs at least one model and one algorithm")
    batches = []
    for cfg in algorithms:
        for model in models:
            try:
                batches.append(run_attack(model, x, y, cfg))
            except Exception as exc:
                raise AttackError(f"{cfg.algorithm} on {model.name}: {exc}") from exc
    return batches
