"""Named architectures for the MNIST and CIFAR-10 classifiers and DAEs."""

from __future__ import annotations

from ..errors import ConfigurationError, SpecError
from .spec import BATCHNORM, FLATTEN, MAXPOOL, UPSAMPLE, LayerSpec, ModelSpec, activation, conv, dense, dropout

MNIST_SHAPE = (28, 28, 1)
CIFAR_SHAPE = (32, 32, 3)


def fc_spec(name, hidden, input_shape=MNIST_SHAPE, classes=10):
    """FC-n1-...-nl classifier: ReLU hidden layers, softmax output."""
    layers = [FLATTEN] + [dense(n, "relu") for n in hidden] + [dense(classes, "softmax")]
    return ModelSpec(name, input_shape, tuple(layers))


def mnist_fc_victim():
    return fc_spec("mnist-fc-victim", [100, 100])


def mnist_fc_adversary():
    return fc_spec("mnist-fc-adversary", [200, 100, 100])


def mnist_cnn_adversary():
    return ModelSpec("mnist-cnn-adversary", MNIST_SHAPE, (
        conv(32, 3, "relu"),
        conv(64, 3, "relu"),
        MAXPOOL,
        dropout(0.25),
        FLATTEN,
        dense(128, "relu"),
        dropout(0.5),
        dense(10, "softmax"),
    ))


def mnist_cnn_victim(keep_pool=True):
    """The adversary CNN truncated after its two conv layers.

    ``keep_pool`` keeps the max-pool/dropout block between the convolutions and
    the softmax layer; pass False for conv-conv-softmax only.
    """
    layers = [conv(32, 3, "relu"), conv(64, 3, "relu")]
    if keep_pool:
        layers += [MAXPOOL, dropout(0.25)]
    layers += [FLATTEN, dense(10, "softmax")]
    return ModelSpec("mnist-cnn-victim", MNIST_SHAPE, tuple(layers))


def conv_elu_bn(filters):
    return (conv(filters, 3), activation("elu"), BATCHNORM)


def cifar_cnn_victim():
    layers = []
    for filters, rate in ((32, 0.2), (64, 0.3), (128, 0.4), (128, 0.4)):
        layers += conv_elu_bn(filters) * 2
        layers += [MAXPOOL, dropout(rate)]
    layers += [FLATTEN, dense(10, "softmax")]
    return ModelSpec("cifar-cnn-victim", CIFAR_SHAPE, tuple(layers))


def sequence_ends(spec):
    """Indices of the batchnorm layer closing each (conv, ELU, batchnorm) run."""
    ends = []
    layers = spec.layers
    for i in range(2, len(layers)):
        a, b, c = layers[i - 2], layers[i - 1], layers[i]
        if a.kind == "conv" and b.kind == "activation" and b.activation == "elu" and c.kind == "batchnorm":
            ends.append(i)
    return ends


def insert_sequence(spec, after, name):
    """Insert one extra (conv, ELU, batchnorm) run after the ``after``-th run.

    The new conv copies the filter count of the conv closing that run.
    Returns the new spec and the inserted filter count.
    """
    ends = sequence_ends(spec)
    if not 1 <= after <= len(ends):
        raise SpecError(f"spec has {len(ends)} conv/ELU/batchnorm runs, cannot insert after #{after}")
    end = ends[after - 1]
    filters = spec.layers[end - 2].filters
    layers = spec.layers[:end + 1] + conv_elu_bn(filters) + spec.layers[end + 1:]
    return ModelSpec(name, spec.input_shape, layers), filters


def cifar_cnn_adversary():
    return insert_sequence(cifar_cnn_victim(), 8, "cifar-cnn-adversary")[0]


def cifar_cnn_variant(after):
    return insert_sequence(cifar_cnn_victim(), after, f"cifar-cnn-variant-{after}")[0]


def mnist_dae():
    """FC-784-256-128-81-128-256-784 with identity hidden layers, sigmoid output."""
    layers = [FLATTEN] + [dense(n, "linear") for n in (256, 128, 81, 128, 256)]
    layers += [dense(784, "sigmoid"), LayerSpec("reshape", shape=MNIST_SHAPE)]
    return ModelSpec("mnist-dae", MNIST_SHAPE, tuple(layers))


def cifar_dae():
    # the final conv emits 3 channels so the reconstruction matches the input
    return ModelSpec("cifar-dae", CIFAR_SHAPE, (
        conv(64, 3, "relu"),
        conv(32, 3, "relu"),
        MAXPOOL,
        conv(3, 3, "relu"),
        conv(32, 3, "relu"),
        UPSAMPLE,
        conv(64, 3, "relu"),
        conv(3, 3, "sigmoid"),
    ))


PRESETS = {
    "mnist-fc-victim": mnist_fc_victim,
    "mnist-fc-adversary": mnist_fc_adversary,
    "mnist-cnn-victim": mnist_cnn_victim,
    "mnist-cnn-adversary": mnist_cnn_adversary,
    "cifar-cnn-victim": cifar_cnn_victim,
    "cifar-cnn-adversary": cifar_cnn_adversary,
    "cifar-cnn-variant-2": lambda: cifar_cnn_variant(2),
    "cifar-cnn-variant-4": lambda: cifar_cnn_variant(4),
    "cifar-cnn-variant-6": lambda: cifar_cnn_variant(6),
    "mnist-dae": mnist_dae,
    "cifar-dae": cifar_dae,
}

# architecture family of each classifier preset, used to tag attack provenance
ARCH_TYPES = {
    "mnist-fc-victim": "fc",
    "mnist-fc-adversary": "fc",
    "mnist-cnn-victim": "cnn",
    "mnist-cnn-adversary": "cnn",
    "cifar-cnn-victim": "cnn",
    "cifar-cnn-adversary": "cnn",
    "cifar-cnn-variant-2": "cnn",
    "cifar-cnn-variant-4": "cnn",
    "cifar-cnn-variant-6": "cnn",
}


def get_preset(name):
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def arch_type(spec):
    """'fc' when the spec has no conv layer, else 'cnn'."""
    return "cnn" if any(layer.kind == "conv" for layer in spec.layers) else "fc"
