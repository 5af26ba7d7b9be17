"""Denoising-autoencoder defense trained on an ensemble of attack noise.

The DAE learns to map both clean images and their adversarial versions
back to the clean image.  Adversarial inputs come from every configured
attack algorithm applied with every configured source model, so the
defense does not depend on guessing the attacker's exact choice.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .attacks import AttackConfig, generate_attack_suite, run_attack
from .errors import AttackError, ContractError, DimensionError, EnsembleSizeError, SpecError
from .nn.model import TRAIN_PRESETS, Model, TrainConfig, build_model, train
from .nn.presets import cifar_cnn_victim, insert_sequence, mnist_dae, sequence_ends
from .nn.spec import ModelSpec

log = logging.getLogger(__name__)

DEFAULT_MAX_BYTES = 4 * 2**30


def validate_dae_spec(spec: ModelSpec):
    """A DAE must reproduce its input shape and end in a sigmoid."""
    if spec.output_shape != spec.input_shape:
        raise SpecError(f"DAE {spec.name} maps {spec.input_shape} to {spec.output_shape}")
    acts = [layer.act for layer in spec.layers if layer.kind in ("dense", "conv", "activation")]
    if not acts or acts[-1] != "sigmoid":
        raise SpecError(f"DAE {spec.name} must end in a sigmoid activation")
    return spec


@dataclass
class DefenseEnsembleConfig:
    list_attack_alg: list
    list_w_model: list
    dae_spec: ModelSpec = field(default_factory=mnist_dae)
    train: TrainConfig = TRAIN_PRESETS["mnist-dae-desk"]
    shuffle_seed: int = 0
    cache_dir: Optional[str] = None
    max_bytes: int = DEFAULT_MAX_BYTES

    def __post_init__(self):
        if not self.list_attack_alg or not self.list_w_model:
            raise ContractError("list_attack_alg and list_w_model must both be non-empty")
        for cfg in self.list_attack_alg:
            if not isinstance(cfg, AttackConfig):
                raise ContractError("list_attack_alg must hold AttackConfig instances")
        validate_dae_spec(self.dae_spec)


def data_hash(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str((a.dtype.str, a.shape)).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def attack_cache_key(model, cfg, x, y):
    payload = json.dumps({"model": model.fingerprint(), "attack": cfg.to_dict(), "data": data_hash(x, y)},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def cached_attack(model, x, y, cfg, cache_dir=None):
    """Run an attack, reusing an on-disk result keyed by model, config and data.

    Fresh results are saved and read back, so cached and uncached calls
    return the same 32-bit-rounded arrays.
    """
    if cache_dir is None:
        return run_attack(model, x, y, cfg)
    from .harness.checkpoint import load_checkpoint, save_checkpoint

    path = Path(cache_dir) / f"attack-{attack_cache_key(model, cfg, x, y)[:32]}.ansm"
    if not path.exists():
        log.info("attack cache miss: %s on %s", cfg.label(), model.name)
        save_checkpoint(run_attack(model, x, y, cfg), path)
    return load_checkpoint(path)


def estimate_training_bytes(n, sample_shape, n_batches):
    """Bytes held by the paired (input, target) arrays in float64."""
    per = int(np.prod(sample_shape)) * 8
    pairs = n * (n_batches + 1)
    return 2 * pairs * per + n_batches * n * per


def check_size(n, sample_shape, n_batches, max_bytes):
    need = estimate_training_bytes(n, sample_shape, n_batches)
    if need > max_bytes:
        raise EnsembleSizeError(f"ensemble training set needs about {need / 2**30:.2f} GiB "
                                f"({n_batches} attack batches x {n} samples), budget {max_bytes / 2**30:.2f} GiB")
    return need


@dataclass
class TrainingSet:
    """Shuffled DAE training pairs.

    ``source[i]`` is the index into the unshuffled concatenation
    ``[x_train, x_adv]`` that ended up at position ``i``; the clean original
    of every pair is ``x_train[source[i] % N]``.
    """

    inputs: np.ndarray
    targets: np.ndarray
    source: np.ndarray
    n_clean: int

    def __len__(self):
        return self.inputs.shape[0]

    def origin(self):
        return self.source % self.n_clean


def build_training_set(x_train, adversarial, shuffle_seed=0):
    """Pair clean and adversarial inputs with clean targets, then shuffle.

    ``adversarial`` is a list of AdversarialBatch (or arrays), each aligned
    with ``x_train``.  Targets repeat ``x_train`` once more than there are
    adversarial copies, and one permutation is applied to both sides.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    n = x_train.shape[0]
    if n == 0:
        raise ContractError("x_train must be non-empty")
    advs = [getattr(b, "perturbed", b) for b in adversarial]
    for a in advs:
        if a.shape != x_train.shape:
            raise DimensionError(f"adversarial batch shape {a.shape} does not match x_train {x_train.shape}")
    x_adv = np.concatenate(advs) if advs else x_train[:0]
    if len(x_adv) % n:
        raise ContractError(f"len(x_adv)={len(x_adv)} is not a multiple of len(x_train)={n}")
    copies = len(x_adv) // n + 1
    inputs = np.concatenate([x_train, x_adv])
    targets = np.concatenate([x_train] * copies)
    shuf_idx = np.random.default_rng(shuffle_seed).permutation(len(inputs))
    return TrainingSet(inputs[shuf_idx], targets[shuf_idx], shuf_idx, n)


def train_dae(training_set, spec=None, cfg=None, seed=0):
    """Fit a DAE with MSE on a :class:`TrainingSet`; returns (model, history)."""
    spec = validate_dae_spec(spec or mnist_dae())
    cfg = cfg or TRAIN_PRESETS["mnist-dae-desk"]
    if cfg.loss != "mse":
        raise ContractError("DAE training uses the mse loss")
    if training_set.inputs.shape[1:] != spec.input_shape:
        raise DimensionError(f"DAE expects {spec.input_shape}, training data has {training_set.inputs.shape[1:]}")
    model = build_model(spec, seed)
    model, history = train(model, (training_set.inputs, training_set.targets), cfg)
    model = model.quantized()
    model.meta = {"final_loss": history[-1]["loss"], "first_loss": history[0]["loss"],
                  "pairs": len(training_set)}
    return model, history


def dae_generator(x_train, y_train, cfg: DefenseEnsembleConfig, return_details=False):
    """Attack x_train with every (algorithm, model) pair and train the DAE.

    Returns the trained DAE, or ``(dae, training_set, history, batches)``
    when ``return_details`` is set.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    if x_train.shape[0] == 0:
        raise ContractError("x_train must be non-empty")
    n_batches = len(cfg.list_attack_alg) * len(cfg.list_w_model)
    check_size(x_train.shape[0], x_train.shape[1:], n_batches, cfg.max_bytes)
    if cfg.cache_dir is None:
        batches = generate_attack_suite(cfg.list_w_model, cfg.list_attack_alg, x_train, y_train)
    else:
        batches = []
        for alg in cfg.list_attack_alg:
            for model in cfg.list_w_model:
                try:
                    batches.append(cached_attack(model, x_train, y_train, alg, cfg.cache_dir))
                except Exception as exc:
                    raise AttackError(f"{alg.algorithm} on {model.name}: {exc}") from exc
    tset = build_training_set(x_train, batches, cfg.shuffle_seed)
    dae, history = train_dae(tset, cfg.dae_spec, cfg.train, seed=cfg.shuffle_seed)
    if return_details:
        return dae, tset, history, batches
    return dae


def test_time_defense(w_dae: Model, x_test):
    """Reconstruct test images with the DAE in inference mode."""
    x_test = np.asarray(x_test, dtype=np.float64)
    if x_test.shape[1:] != w_dae.input_shape:
        raise DimensionError(f"DAE expects {w_dae.input_shape}, got {x_test.shape[1:]}")
    return w_dae.predict(x_test)


test_time_defense.__test__ = False  # not a pytest test despite the name


@dataclass(frozen=True)
class Variant:
    spec: ModelSpec
    role: str  # "defense-training" or "adversary"
    inserted_after: int
    filters: int


def _check_cifar_victim(base):
    ref = cifar_cnn_victim()
    if base.input_shape != ref.input_shape or [l.to_dict() for l in base.layers] != [l.to_dict() for l in ref.layers]:
        raise SpecError(f"{base.name} is not the CIFAR-10 victim architecture")


def build_cifar_variants(base: ModelSpec):
    """Defense-training variants after runs 2, 4, 6 and the adversary after run 8."""
    _check_cifar_victim(base)
    assert len(sequence_ends(base)) == 8
    out = []
    for after, role in ((2, "defense-training"), (4, "defense-training"), (6, "defense-training"), (8, "adversary")):
        name = "cifar-cnn-adversary" if role == "adversary" else f"cifar-cnn-variant-{after}"
        spec, filters = insert_sequence(base, after, name)
        out.append(Variant(spec, role, after, filters))
    return out
