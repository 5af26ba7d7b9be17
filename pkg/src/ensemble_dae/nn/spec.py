"""Declarative layer and model specifications with shape inference."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

from ..errors import SpecError

LAYER_KINDS = ("dense", "conv", "maxpool", "upsample", "dropout", "batchnorm", "flatten", "activation", "reshape")
ACTIVATIONS = ("relu", "elu", "sigmoid", "softmax", "linear")

# parameters that must be present (True) or absent (False) per kind
_REQUIRED = {
    "dense": {"units"},
    "conv": {"filters", "kernel"},
    "maxpool": set(),
    "upsample": set(),
    "dropout": {"rate"},
    "batchnorm": set(),
    "flatten": set(),
    "activation": {"activation"},
    "reshape": {"shape"},
}
_OPTIONAL = {"dense": {"activation"}, "conv": {"activation"}}
_FIELDS = ("units", "filters", "kernel", "rate", "activation", "shape")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: Optional[int] = None
    filters: Optional[int] = None
    kernel: Optional[int] = None
    rate: Optional[float] = None
    activation: Optional[str] = None
    shape: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        allowed = _REQUIRED[self.kind] | _OPTIONAL.get(self.kind, set())
        for name in _FIELDS:
            present = getattr(self, name) is not None
            if present and name not in allowed:
                raise SpecError(f"{self.kind} layer does not take '{name}'")
            if not present and name in _REQUIRED[self.kind]:
                raise SpecError(f"{self.kind} layer requires '{name}'")
        if self.rate is not None and not 0.0 <= self.rate < 1.0:
            raise SpecError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.activation is not None and self.activation not in ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")
        if self.shape is not None:
            object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    @property
    def act(self):
        return self.activation or "linear"

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("shape") is not None:
            d["shape"] = tuple(d["shape"])
        return cls(**d)


def dense(units, activation=None):
    return LayerSpec("dense", units=units, activation=activation)


def conv(filters, kernel=3, activation=None):
    return LayerSpec("conv", filters=filters, kernel=kernel, activation=activation)


def activation(name):
    return LayerSpec("activation", activation=name)


def dropout(rate):
    return LayerSpec("dropout", rate=rate)


MAXPOOL = LayerSpec("maxpool")
UPSAMPLE = LayerSpec("upsample")
BATCHNORM = LayerSpec("batchnorm")
FLATTEN = LayerSpec("flatten")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))

    def output_shapes(self):
        """Per-layer output shapes (without batch axis).

        Raises :class:`SpecError` naming the first layer that does not compose.
        """
        shape = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            shape = _next_shape(shape, layer, i)
            shapes.append(shape)
        return shapes

    @property
    def output_shape(self):
        shapes = self.output_shapes()
        return shapes[-1] if shapes else self.input_shape

    def to_dict(self):
        return {"name": self.name, "input_shape": list(self.input_shape),
                "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], tuple(d["input_shape"]), tuple(LayerSpec.from_dict(x) for x in d["layers"]))


def _next_shape(shape, layer, i):
    k = layer.kind
    if k == "dense":
        if len(shape) != 1:
            raise SpecError(f"layer {i}: dense needs a flat input, got {shape}", i)
        return (layer.units,)
    if k == "conv":
        if len(shape) != 3:
            raise SpecError(f"layer {i}: conv needs (H, W, C) input, got {shape}", i)
        if layer.kernel % 2 == 0:
            raise SpecError(f"layer {i}: 'same' padding needs an odd kernel", i)
        return shape[:2] + (layer.filters,)
    if k == "maxpool":
        if len(shape) != 3 or shape[0] % 2 or shape[1] % 2:
            raise SpecError(f"layer {i}: maxpool 2x2 needs even (H, W, C) input, got {shape}", i)
        return (shape[0] // 2, shape[1] // 2, shape[2])
    if k == "upsample":
        if len(shape) != 3:
            raise SpecError(f"layer {i}: upsample needs (H, W, C) input, got {shape}", i)
        return (shape[0] * 2, shape[1] * 2, shape[2])
    if k == "flatten":
        n = 1
        for s in shape:
            n *= s
        return (n,)
    if k == "reshape":
        n_in = n_out = 1
        for s in shape:
            n_in *= s
        for s in layer.shape:
            n_out *= s
        if n_in != n_out:
            raise SpecError(f"layer {i}: cannot reshape {shape} to {layer.shape}", i)
        return layer.shape
    return shape  # dropout, batchnorm, activation
