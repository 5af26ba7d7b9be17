"""Model specs, presets, optimizers and training loops."""

from .model import (
    TRAIN_PRESETS,
    Forward,
    Model,
    TrainConfig,
    build_model,
    count_correct,
    evaluate_accuracy,
    fit,
    predict_logits,
    train,
)
from .presets import ARCH_TYPES, PRESETS, arch_type, fc_spec, get_preset
from .spec import BATCHNORM, FLATTEN, MAXPOOL, UPSAMPLE, LayerSpec, ModelSpec, activation, conv, dense, dropout

__all__ = [
    "ARCH_TYPES", "BATCHNORM", "FLATTEN", "MAXPOOL", "PRESETS", "TRAIN_PRESETS", "UPSAMPLE", "Forward", "LayerSpec",
    "Model", "ModelSpec", "TrainConfig", "activation", "arch_type", "build_model", "conv", "count_correct", "dense",
    "dropout", "evaluate_accuracy", "fc_spec", "fit", "get_preset", "predict_logits", "train",
]
