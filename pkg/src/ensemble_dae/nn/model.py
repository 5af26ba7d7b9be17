"""Model construction, forward passes, training and evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Graph, Tensor, loss_eval, one_hot, op_apply
from ..errors import ConfigurationError, ContractError, DimensionError, NumericalError, SpecError, TrainingError
from .optim import OPTIMIZERS, make_optimizer
from .spec import ModelSpec

log = logging.getLogger(__name__)

LOSSES = ("categorical_crossentropy", "mse")


def _f32(a):
    """Round to the nearest float32 value, kept in float64."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass
class Forward:
    logits: Tensor
    output: Tensor
    params: dict = field(default_factory=dict)


class Model:
    """A :class:`ModelSpec` plus learned parameters and batchnorm statistics."""

    def __init__(self, spec, params, state, seed=0, meta=None):
        self.spec = spec
        self.params = params
        self.state = state
        self.seed = seed
        self.meta = dict(meta or {})

    @property
    def name(self):
        return self.spec.name

    @property
    def input_shape(self):
        return self.spec.input_shape

    def copy(self):
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()},
                     {k: {s: a.copy() for s, a in v.items()} for k, v in self.state.items()}, self.seed, self.meta)

    def quantized(self):
        """Copy with every stored array rounded to float32 precision.

        This is exactly what a checkpoint save/load round trip yields.
        """
        m = self.copy()
        m.params = {k: _f32(v) for k, v in m.params.items()}
        m.state = {k: {s: _f32(a) for s, a in v.items()} for k, v in m.state.items()}
        return m

    def arrays(self):
        """Flat name -> array mapping of parameters and running statistics."""
        out = dict(self.params)
        for layer, stats in self.state.items():
            for s, a in stats.items():
                out[f"{layer}.running_{s}"] = a
        return out

    @classmethod
    def from_arrays(cls, spec, arrays, seed=0):
        params, state = {}, {}
        for name, a in arrays.items():
            layer, _, rest = name.partition(".")
            if rest.startswith("running_"):
                state.setdefault(layer, {})[rest[len("running_"):]] = np.asarray(a, dtype=np.float64)
            else:
                params[name] = np.asarray(a, dtype=np.float64)
        model = cls(spec, params, state, seed)
        expected = build_model(spec, seed)
        for name, a in expected.arrays().items():
            got = model.arrays().get(name)
            if got is None or got.shape != a.shape:
                raise SpecError(f"array {name!r} missing or has wrong shape for spec {spec.name}")
        return model

    def fingerprint(self):
        """SHA-256 over spec and stored arrays, used as a cache key."""
        h = hashlib.sha256(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        for name, a in sorted(self.arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()

    def forward(self, graph, x, mode="infer", rng=None, trainable=False):
        """Record the forward pass on ``graph``.

        Returns the pre-softmax logits (or the raw output when the model does
        not end in softmax), the output, and the parameter tensors.
        """
        params = {name: graph.tensor(v, requires_grad=trainable) for name, v in self.params.items()}
        h = x
        pre_softmax = softmax_out = None
        for i, layer in enumerate(self.spec.layers):
            key = f"{i:02d}"
            k = layer.kind
            act = None
            if k == "dense":
                h = op_apply("add", [op_apply("matmul", [h, params[key + ".kernel"]]), params[key + ".bias"]])
                act = layer.act
            elif k == "conv":
                h = op_apply("conv2d", [h, params[key + ".kernel"], params[key + ".bias"]])
                act = layer.act
            elif k == "activation":
                act = layer.activation
            elif k == "maxpool":
                h = op_apply("maxpool2x2", [h])
            elif k == "upsample":
                h = op_apply("upsample2x2", [h])
            elif k == "flatten":
                h = op_apply("flatten", [h])
            elif k == "reshape":
                h = op_apply("reshape", [h], shape=layer.shape)
            elif k == "dropout":
                h = op_apply("dropout", [h], mode, rate=layer.rate, rng=rng)
            elif k == "batchnorm":
                h = op_apply("batchnorm", [h, params[key + ".gamma"], params[key + ".beta"]], mode,
                             state=self.state[key])
            if act is not None and act != "linear":
                pre = h
                h = op_apply(act, [h])
                if act == "softmax":
                    pre_softmax, softmax_out = pre, h
        logits = pre_softmax if softmax_out is h else h
        return Forward(logits, h, params)

    def _batched(self, x, batch_size, which):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise DimensionError(f"{self.name} expects inputs of shape {self.input_shape}, got {x.shape[1:]}")
        outs = []
        for start in range(0, x.shape[0], batch_size):
            g = Graph()
            fw = self.forward(g, g.tensor(x[start:start + batch_size]))
            outs.append(getattr(fw, which).values)
        if not outs:
            return np.zeros((0,) + self.spec.output_shape)
        return np.concatenate(outs)

    def predict(self, x, batch_size=500):
        """Infer-mode output (class probabilities or reconstructions)."""
        return self._batched(x, batch_size, "output")

    def logits(self, x, batch_size=500):
        return self._batched(x, batch_size, "logits")


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return _f32(rng.uniform(-limit, limit, size=shape))


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """Glorot-uniform weights and zero biases, deterministic per ``seed``.

    Initial values are float32-representable so a checkpoint round trip is
    lossless.
    """
    shapes = spec.output_shapes()
    rng = np.random.default_rng(seed)
    params, state = {}, {}
    prev = spec.input_shape
    for i, (layer, shape) in enumerate(zip(spec.layers, shapes)):
        key = f"{i:02d}"
        if layer.kind == "dense":
            params[key + ".kernel"] = _glorot(rng, (prev[0], layer.units), prev[0], layer.units)
            params[key + ".bias"] = np.zeros(layer.units)
        elif layer.kind == "conv":
            k, cin, cout = layer.kernel, prev[2], layer.filters
            params[key + ".kernel"] = _glorot(rng, (k, k, cin, cout), k * k * cin, k * k * cout)
            params[key + ".bias"] = np.zeros(cout)
        elif layer.kind == "batchnorm":
            c = prev[-1]
            params[key + ".gamma"] = np.ones(c)
            params[key + ".beta"] = np.zeros(c)
            state[key] = {"mean": np.zeros(c), "var": np.ones(c)}
        prev = shape
    return Model(spec, params, state, seed)


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "categorical_crossentropy"
    optimizer: str = "adam"
    lr: float = 0.001
    batch_size: int = 200
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise ContractError("learning rate must be positive")
        if self.batch_size < 1:
            raise ContractError("batch size must be at least 1")
        if self.epochs < 1:
            raise ContractError("epochs must be at least 1")

    def replace(self, **kw):
        d = self.__dict__.copy()
        d.update(kw)
        return TrainConfig(**d)


# Training parameters per network family; '-desk' variants shorten epochs.
TRAIN_PRESETS = {
    "mnist-fc": TrainConfig("categorical_crossentropy", "adam", 0.001, 200, 100),
    "mnist-fc-desk": TrainConfig("categorical_crossentropy", "adam", 0.001, 200, 20),
    "mnist-cnn": TrainConfig("categorical_crossentropy", "adam", 0.001, 200, 20),
    "mnist-cnn-desk": TrainConfig("categorical_crossentropy", "adam", 0.001, 200, 3),
    "mnist-dae": TrainConfig("mse", "adam", 0.001, 200, 150),
    "mnist-dae-desk": TrainConfig("mse", "adam", 0.001, 200, 20),
    "cifar-cnn": TrainConfig("categorical_crossentropy", "rmsprop", 0.001, 64, 150),
    "cifar-dae": TrainConfig("mse", "adam", 0.001, 256, 150),
}


def fit(model, inputs, targets, cfg, augment=None):
    """Train ``model`` in place on (inputs, targets).

    ``targets`` holds integer labels for crossentropy and arrays shaped like
    the model output for MSE.  ``augment`` (an AugmentConfig) redraws random
    transforms of each batch every epoch.  Returns the per-epoch history.
    """
    from ..datasets import augment_images

    n = inputs.shape[0]
    if n == 0:
        raise ContractError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    classify = cfg.loss == "categorical_crossentropy"
    history = []
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        try:
            for start in range(0, n, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                xb = inputs[idx]
                if augment is not None:
                    xb = augment_images(xb, augment, rng)
                g = Graph()
                fw = model.forward(g, g.tensor(xb), "train", rng, trainable=True)
                if classify:
                    yb = targets[idx]
                    loss = loss_eval("categorical_crossentropy", fw.logits, one_hot(yb, fw.logits.shape[1]),
                                     from_logits=True)
                    correct += int((fw.logits.values.argmax(axis=1) == yb).sum())
                else:
                    loss = loss_eval("mse", fw.output, targets[idx])
                grads = g.backward(loss)
                total_loss += float(loss.values) * len(idx)
                opt.step(model.params, {name: grads[t.node_id] for name, t in fw.params.items()})
        except NumericalError as exc:
            raise TrainingError(f"training diverged in epoch {epoch}: {exc}", epoch) from exc
        mean_loss = total_loss / n
        if not np.isfinite(mean_loss) or not all(np.all(np.isfinite(p)) for p in model.params.values()):
            raise TrainingError(f"training diverged in epoch {epoch}", epoch)
        history.append({"epoch": epoch, "loss": mean_loss, "accuracy": correct / n if classify else None})
        log.info("%s epoch %d/%d loss %.5f", model.name, epoch, cfg.epochs, mean_loss)
    return history


def train(model, data, cfg, augment=None):
    """Train on a LabeledDataset (classifiers) or an (inputs, targets) pair (DAEs).

    Returns ``(model, history)``; the model is updated in place.
    """
    if isinstance(data, tuple):
        inputs, targets = data
    else:
        inputs, targets = data.images, data.labels
    if len(inputs) == 0:
        raise ContractError("cannot train on an empty dataset")
    if cfg.loss == "categorical_crossentropy":
        targets = np.asarray(targets)
        if targets.min() < 0 or targets.max() >= 10:
            raise ContractError("labels must lie in [0, 10)")
    return model, fit(model, inputs, targets, cfg, augment)


def count_correct(model, images, labels, batch_size=500):
    pred = model.logits(images, batch_size).argmax(axis=1)
    return int((pred == np.asarray(labels)).sum())


def evaluate_accuracy(model, data, batch_size=500):
    """Fraction of argmax-correct predictions in infer mode."""
    if len(data) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    return count_correct(model, data.images, data.labels, batch_size) / len(data)


def predict_logits(model, x):
    """Pre-softmax values Z(x) in infer mode."""
    if isinstance(x, Tensor):
        x = x.values
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == len(model.input_shape):
        x = x[None]
    return model.logits(x)
