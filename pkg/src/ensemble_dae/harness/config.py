"""Experiment configuration: JSON schema, validation and seed derivation."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

from ..errors import ConfigurationError

_NAME = {"type": "string", "pattern": "^[A-Za-z0-9][A-Za-z0-9_.-]*$"}

_TRAIN = {
    "oneOf": [
        {"type": "string"},
        {"type": "object", "additionalProperties": False, "properties": {
            "preset": {"type": "string"},
            "loss": {"enum": ["categorical_crossentropy", "mse"]},
            "optimizer": {"enum": ["sgd", "adam", "rmsprop"]},
            "lr": {"type": "number", "exclusiveMinimum": 0},
            "batch_size": {"type": "integer", "minimum": 1},
            "epochs": {"type": "integer", "minimum": 1},
        }},
    ]
}

SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "models"],
    "properties": {
        "description": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "dataset": {
            "type": "object", "additionalProperties": False, "required": ["name"],
            "properties": {
                "name": {"enum": ["mnist", "cifar10", "synthetic"]},
                "path": {"type": "string"},
                "n_train": {"type": "integer", "minimum": 1},
                "n_test": {"type": "integer", "minimum": 1},
            },
        },
        "models": {
            "type": "object", "minProperties": 1, "propertyNames": _NAME,
            "additionalProperties": {
                "type": "object", "additionalProperties": False,
                "properties": {
                    "preset": {"type": "string"},
                    "checkpoint": {"type": "string"},
                    "train": _TRAIN,
                    "augment": {"type": "boolean"},
                    "seed": {"type": "integer", "minimum": 0},
                },
                "oneOf": [{"required": ["preset"]}, {"required": ["checkpoint"]}],
            },
        },
        "attacks": {
            "type": "object", "propertyNames": _NAME,
            "additionalProperties": {
                "type": "object", "additionalProperties": False, "required": ["algorithm", "model"],
                "properties": {
                    "algorithm": {"enum": ["fgs", "deepfool", "cw"]},
                    "model": _NAME,
                    "epsilon": {"type": "number", "exclusiveMinimum": 0},
                    "params": {"type": "object"},
                },
            },
        },
        "defenses": {
            "type": "object", "propertyNames": _NAME,
            "additionalProperties": {
                "type": "object", "additionalProperties": False, "required": ["attacks"],
                "properties": {
                    "arch": {"enum": ["mnist-dae", "cifar-dae"]},
                    "attacks": {"type": "array", "minItems": 1, "items": _NAME},
                    "train": _TRAIN,
                    "seed": {"type": "integer", "minimum": 0},
                },
            },
        },
        "scenarios": {
            "type": "array",
            "items": {
                "type": "object", "additionalProperties": False,
                "required": ["name", "family", "victim", "proposed"],
                "properties": {
                    "name": _NAME,
                    "family": {"enum": ["vary-arch", "vary-attack"]},
                    "victim": _NAME,
                    "attack": {"oneOf": [_NAME, {"type": "null"}]},
                    "proposed": _NAME,
                    "baselines": {"oneOf": [{"const": "auto"}, {"type": "array", "items": _NAME}]},
                    "study_attack": {"enum": ["fgs", "deepfool", "cw"]},
                    "attack_menu": {"type": "array", "items": {"enum": ["fgs", "deepfool", "cw"]}},
                    "baseline_free": {"type": "boolean"},
                },
            },
        },
    },
}


def derive_seed(seed, *names):
    """Stable 32-bit sub-seed for a named stage output."""
    h = hashlib.sha256(json.dumps([seed, *names]).encode()).digest()
    return int.from_bytes(h[:4], "little")


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_json(obj):
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def validate_config(config, base_dir=None, check_paths=True):
    """Schema check plus cross references and input paths.

    Returns a normalised deep copy.  Raises ConfigurationError listing the
    first problem found; nothing is computed before this passes.
    """
    from ..nn.model import TRAIN_PRESETS
    from ..nn.presets import PRESETS

    try:
        jsonschema.validate(config, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigurationError(f"config invalid at {where}: {exc.message}") from None
    cfg = copy.deepcopy(config)
    cfg.setdefault("seed", 0)
    cfg.setdefault("attacks", {})
    cfg.setdefault("defenses", {})
    cfg.setdefault("scenarios", [])
    base = Path(base_dir) if base_dir else Path.cwd()

    ds = cfg["dataset"]
    if ds["name"] != "synthetic":
        if "path" not in ds:
            raise ConfigurationError(f"dataset {ds['name']} needs a path")
        if check_paths and not (base / ds["path"]).exists():
            raise ConfigurationError(f"dataset path {ds['path']} does not exist")

    def check_train(where, train):
        name = train if isinstance(train, str) else train.get("preset")
        if name is not None and name not in TRAIN_PRESETS:
            raise ConfigurationError(f"{where}: unknown training preset {name!r}")

    for name, m in cfg["models"].items():
        if "preset" in m:
            if m["preset"] not in PRESETS or m["preset"].endswith("-dae"):
                raise ConfigurationError(f"model {name}: unknown classifier preset {m['preset']!r}")
        elif check_paths and not (base / m["checkpoint"]).exists():
            raise ConfigurationError(f"model {name}: checkpoint {m['checkpoint']} does not exist")
        if "train" in m:
            check_train(f"model {name}", m["train"])
    for name, a in cfg["attacks"].items():
        if a["model"] not in cfg["models"]:
            raise ConfigurationError(f"attack {name}: unknown model {a['model']!r}")
    for name, d in cfg["defenses"].items():
        for a in d["attacks"]:
            if a not in cfg["attacks"]:
                raise ConfigurationError(f"defense {name}: unknown attack {a!r}")
        if "train" in d:
            check_train(f"defense {name}", d["train"])
    seen = set()
    for sc in cfg["scenarios"]:
        if sc["name"] in seen:
            raise ConfigurationError(f"duplicate scenario name {sc['name']!r}")
        seen.add(sc["name"])
        if sc["victim"] not in cfg["models"]:
            raise ConfigurationError(f"scenario {sc['name']}: unknown victim {sc['victim']!r}")
        if sc.get("attack") is not None and sc["attack"] not in cfg["attacks"]:
            raise ConfigurationError(f"scenario {sc['name']}: unknown attack {sc['attack']!r}")
        refs = [sc["proposed"]] + (sc["baselines"] if isinstance(sc.get("baselines"), list) else [])
        for d in refs:
            if d not in cfg["defenses"]:
                raise ConfigurationError(f"scenario {sc['name']}: unknown defense {d!r}")
    return cfg


def shipped_config(name):
    """Path of a config shipped with the package, e.g. ``smoke`` or ``mnist-ensemble``."""
    path = Path(__file__).resolve().parents[1] / "configs" / f"{name}.json"
    if not path.is_file():
        raise ConfigurationError(f"no shipped config named {name!r}")
    return path


def load_config(path, check_paths=True):
    path = Path(path)
    try:
        config = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return validate_config(config, base_dir=path.parent, check_paths=check_paths), path.parent
