"""Staged experiment runner: data, train, attack, train-dae, evaluate, report.

Every stage output is stored under ``<out_dir>/cache`` with a file name
derived from the SHA-256 of its configuration and input artifact hashes,
so a rerun only recomputes what changed.  Models and attack batches are
always read back from disk, which makes cached and fresh runs identical.
"""

from __future__ import annotations

import fcntl
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..attacks import AttackConfig
from ..datasets import load_cifar10, load_mnist, make_synthetic
from ..defense import attack_cache_key, build_training_set, cached_attack, data_hash, train_dae
from ..errors import ConfigurationError, EnsembleDaeError, StageError
from ..evaluation import DefenseKey, ScenarioResult, ScenarioSpec, format_report, run_scenario
from ..nn.model import TRAIN_PRESETS, build_model, count_correct, train
from ..nn.presets import arch_type, get_preset
from .checkpoint import load_checkpoint, save_checkpoint
from .config import derive_seed, load_config, sha256_json, validate_config

log = logging.getLogger(__name__)

RESULTS_SCHEMA = "ensemble-dae-results/1"
# 1 is left for unexpected crashes and 2 for argparse usage errors
EXIT_CODES = {"config": 3, "data": 4, "train": 5, "attack": 6, "train-dae": 7, "evaluate": 8, "report": 9,
              "images": 10, "lock": 11}
SYNTHETIC_DEFAULTS = (1000, 200)


@contextmanager
def stage(name):
    """Turn any failure inside the block into a StageError for ``name``."""
    try:
        yield
    except StageError:
        raise
    except (EnsembleDaeError, OSError, ValueError, MemoryError) as exc:
        raise StageError(name, exc, EXIT_CODES[name]) from exc


@contextmanager
def directory_lock(out_dir):
    """Exclusive ownership of ``out_dir`` for the life of the block."""
    out_dir.mkdir(parents=True, exist_ok=True)
    fh = open(out_dir / ".lock", "w")
    try:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise StageError("lock", f"{out_dir} is in use by another experiment", EXIT_CODES["lock"]) from None
        fh.write(str(os.getpid()))
        fh.flush()
        yield
    finally:
        fh.close()


@dataclass
class RunSummary:
    results: dict
    out_dir: Path
    hits: list = field(default_factory=list)
    misses: list = field(default_factory=list)

    @property
    def all_cached(self):
        return not self.misses


def _default_train(preset):
    for prefix, name in (("mnist-fc", "mnist-fc-desk"), ("mnist-cnn", "mnist-cnn-desk"), ("cifar", "cifar-cnn")):
        if preset.startswith(prefix):
            return name
    return "mnist-fc-desk"


def resolve_train(spec, default):
    """A training preset name or a dict of overrides on top of a preset."""
    if spec is None:
        spec = default
    if isinstance(spec, str):
        return TRAIN_PRESETS[spec]
    overrides = dict(spec)
    base = TRAIN_PRESETS[overrides.pop("preset", default)]
    return base.replace(**overrides)


def _cfg_dict(tcfg):
    return dict(tcfg.__dict__)


class _Run:
    def __init__(self, cfg, base_dir, out_dir):
        self.cfg = cfg
        self.base = Path(base_dir)
        self.out = Path(out_dir)
        self.cache = self.out / "cache"
        self.seed = cfg["seed"]
        self.summary = RunSummary({}, self.out)

    def _mark(self, what, hit):
        (self.summary.hits if hit else self.summary.misses).append(what)

    # -- data --
    def load_data(self):
        ds = self.cfg["dataset"]
        name = ds["name"]
        if name == "synthetic":
            n_train = ds.get("n_train", SYNTHETIC_DEFAULTS[0])
            n_test = ds.get("n_test", SYNTHETIC_DEFAULTS[1])
            self.train = make_synthetic(n_train, seed=derive_seed(self.seed, "data", "train"))
            self.test = make_synthetic(n_test, seed=derive_seed(self.seed, "data", "test"))
        else:
            loader = load_mnist if name == "mnist" else load_cifar10
            path = self.base / ds["path"]
            self.train = loader(path, "train")
            self.test = loader(path, "test")
            if "n_train" in ds:
                self.train = self.train.head(ds["n_train"])
            if "n_test" in ds:
                self.test = self.test.head(ds["n_test"])
        self.train_hash = data_hash(self.train.images, self.train.labels)
        self.test_hash = data_hash(self.test.images, self.test.labels)
        self.split = {"train": self.train, "test": self.test}

    # -- classifiers --
    def train_models(self):
        self.models = {}
        for name, m in sorted(self.cfg["models"].items()):
            if "checkpoint" in m:
                self.models[name] = load_checkpoint(self.base / m["checkpoint"])
                continue
            spec = get_preset(m["preset"])
            seed = m.get("seed", derive_seed(self.seed, "model", name))
            tcfg = resolve_train(m.get("train"), _default_train(m["preset"])).replace(seed=seed)
            augment = bool(m.get("augment", False))
            key = sha256_json({"spec": spec.to_dict(), "train": _cfg_dict(tcfg), "data": self.train_hash,
                               "seed": seed, "augment": augment})
            path = self.cache / "models" / f"{name}-{key[:24]}.ansm"
            hit = path.exists()
            if not hit:
                from ..datasets import CIFAR_AUGMENT

                model = build_model(spec, seed)
                _, history = train(model, self.train, tcfg, CIFAR_AUGMENT if augment else None)
                model = model.quantized()
                model.meta = {"final_train_loss": history[-1]["loss"], "epochs": tcfg.epochs}
                save_checkpoint(model, path)
            self._mark(f"model:{name}", hit)
            self.models[name] = load_checkpoint(path)

    # -- attacks --
    def attack_config(self, name):
        a = self.cfg["attacks"][name]
        params = dict(a.get("params", {}))
        if "epsilon" in a:
            params["epsilon"] = a["epsilon"]
        params.setdefault("seed", derive_seed(self.seed, "attack", name))
        try:
            return AttackConfig(algorithm=a["algorithm"], **params)
        except TypeError as exc:
            raise ConfigurationError(f"attack {name}: {exc}") from None

    def run_attacks(self):
        needed = set()
        for d in self.cfg["defenses"].values():
            needed |= {(a, "train") for a in d["attacks"]}
        for sc in self.cfg["scenarios"]:
            if sc.get("attack"):
                needed.add((sc["attack"], "test"))
        self.batches, self.batch_keys = {}, {}
        for name, split in sorted(needed):
            cfg = self.attack_config(name)
            model = self.models[self.cfg["attacks"][name]["model"]]
            data = self.split[split]
            key = attack_cache_key(model, cfg, data.images, data.labels)
            hit = (self.cache / "attacks" / f"attack-{key[:32]}.ansm").exists()
            self.batches[name, split] = cached_attack(model, data.images, data.labels, cfg, self.cache / "attacks")
            self.batch_keys[name, split] = key
            self._mark(f"attack:{name}:{split}", hit)

    # -- defenses --
    def defense_key(self, name):
        d = self.cfg["defenses"][name]
        algs = [self.cfg["attacks"][a]["algorithm"] for a in d["attacks"]]
        archs = [arch_type(self.models[self.cfg["attacks"][a]["model"]].spec) for a in d["attacks"]]
        return DefenseKey.of(algs, archs)

    def train_defenses(self):
        self.daes = {}
        default_arch = "cifar-dae" if self.cfg["dataset"]["name"] == "cifar10" else "mnist-dae"
        for name, d in sorted(self.cfg["defenses"].items()):
            spec = get_preset(d.get("arch", default_arch))
            tcfg = resolve_train(d.get("train"), "cifar-dae" if spec.name == "cifar-dae" else "mnist-dae-desk")
            seed = d.get("seed", derive_seed(self.seed, "defense", name))
            tcfg = tcfg.replace(seed=seed)
            inputs = [self.batch_keys[a, "train"] for a in d["attacks"]]
            key = sha256_json({"spec": spec.to_dict(), "train": _cfg_dict(tcfg), "attacks": inputs,
                               "data": self.train_hash, "seed": seed})
            path = self.cache / "daes" / f"{name}-{key[:24]}.ansm"
            hit = path.exists()
            if not hit:
                tset = build_training_set(self.train.images, [self.batches[a, "train"] for a in d["attacks"]], seed)
                dae, _ = train_dae(tset, spec, tcfg, seed)
                save_checkpoint(dae, path)
            self._mark(f"dae:{name}", hit)
            self.daes[name] = load_checkpoint(path)

    # -- scenarios --
    def evaluate(self):
        keys = {name: self.defense_key(name) for name in self.daes}
        pool, owner = {}, {}
        for name, k in sorted(keys.items()):
            if k in pool:
                raise ConfigurationError(f"defenses {owner[k]} and {name} share the training key {k}")
            pool[k], owner[k] = self.daes[name], name
        self.scenario_results = []
        for sc in self.cfg["scenarios"]:
            attack = sc.get("attack")
            victim = self.models[sc["victim"]]
            x = self.batches[attack, "test"].perturbed if attack else self.test.images
            explicit = sc.get("baselines", "auto")
            baselines = None if explicit == "auto" else [keys[b] for b in explicit]
            key = sha256_json({
                "scenario": sc, "victim": victim.fingerprint(),
                "input": self.batch_keys[attack, "test"] if attack else self.test_hash,
                "pool": {str(k): m.fingerprint() for k, m in pool.items()},
            })
            path = self.cache / "eval" / f"{sc['name']}-{key[:24]}.json"
            hit = path.exists()
            if hit:
                result = ScenarioResult.from_dict(json.loads(path.read_text()))
            else:
                from ..evaluation import AttackSpec

                attack_spec = None
                if attack:
                    src = self.models[self.cfg["attacks"][attack]["model"]]
                    attack_spec = AttackSpec(self.attack_config(attack), src)
                spec = ScenarioSpec(
                    name=sc["name"], family=sc["family"], victim=victim, images=self.test.images,
                    labels=self.test.labels, defense_pool=pool, proposed=keys[sc["proposed"]],
                    attack=attack_spec, study_attack=sc.get("study_attack"),
                    archs=keys[sc["proposed"]].archs, attacks=tuple(sc.get("attack_menu", ("cw", "deepfool", "fgs"))),
                    baselines=baselines, baseline_free=sc.get("baseline_free", False), attacked_images=x)
                result = run_scenario(spec)
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(json.dumps(result.to_dict(), sort_keys=True))
            self._mark(f"eval:{sc['name']}", hit)
            self.scenario_results.append(result)

    # -- results --
    def results(self):
        def frac(c, n):
            return {"exact": [c, n], "value": c / n}

        models = {}
        for name, m in sorted(self.models.items()):
            models[name] = {"spec": m.spec.name, "arch_type": arch_type(m.spec), "fingerprint": m.fingerprint(),
                            "clean_test_accuracy": frac(count_correct(m, self.test.images, self.test.labels),
                                                        len(self.test))}
        attacks = {}
        for (name, split), b in sorted(self.batches.items()):
            attacks[f"{name}:{split}"] = {"algorithm": b.algorithm, "source": b.source, "split": split,
                                          "config": b.config, "success_rate": float(b.success.mean()),
                                          "mean_norm": float(b.norms.mean()), "cache_key": self.batch_keys[name, split]}
        defenses = {}
        for name, dae in sorted(self.daes.items()):
            recon = dae.predict(self.test.images)
            defenses[name] = {"key": str(self.defense_key(name)), "attacks": self.cfg["defenses"][name]["attacks"],
                              "fingerprint": dae.fingerprint(), "training": dae.meta,
                              "clean_test_mse": float(np.mean((recon - self.test.images) ** 2))}
        return {
            "schema": RESULTS_SCHEMA,
            "seed": self.seed,
            "config_sha256": sha256_json(self.cfg),
            "dataset": {"name": self.cfg["dataset"]["name"], "n_train": len(self.train), "n_test": len(self.test),
                        "train_sha256": self.train_hash, "test_sha256": self.test_hash},
            "models": models,
            "attacks": attacks,
            "defenses": defenses,
            "scenarios": [r.to_dict() for r in self.scenario_results],
        }


def prepare_config(config, seed=None, mnist_dir=None, cifar_dir=None, base_dir=None):
    """Load (if a path) and validate a config, applying command-line overrides."""
    if isinstance(config, (str, Path)):
        raw = json.loads(Path(config).read_text()) if Path(config).exists() else None
        if raw is None:
            raise ConfigurationError(f"config file {config} does not exist")
        base_dir = base_dir or Path(config).parent
    else:
        raw = json.loads(json.dumps(config))
    if seed is not None:
        raw["seed"] = seed
    ds = raw.get("dataset", {})
    if isinstance(ds, dict):
        if mnist_dir and ds.get("name") == "mnist":
            ds["path"] = str(Path(mnist_dir).resolve())
        if cifar_dir and ds.get("name") == "cifar10":
            ds["path"] = str(Path(cifar_dir).resolve())
    return validate_config(raw, base_dir=base_dir), Path(base_dir or Path.cwd())


def run_experiment(config, out_dir, seed=None, mnist_dir=None, cifar_dir=None, base_dir=None):
    """Run every stage, writing results.json and report.md into ``out_dir``.

    Raises StageError (with ``stage`` and ``exit_code``) on the first failure.
    """
    with stage("config"):
        cfg, base = prepare_config(config, seed, mnist_dir, cifar_dir, base_dir)
    out_dir = Path(out_dir)
    with directory_lock(out_dir):
        run = _Run(cfg, base, out_dir)
        with stage("data"):
            run.load_data()
        with stage("train"):
            run.train_models()
        with stage("attack"):
            run.run_attacks()
        with stage("train-dae"):
            run.train_defenses()
        with stage("evaluate"):
            run.evaluate()
        with stage("report"):
            results = run.results()
            text = json.dumps(results, indent=2, sort_keys=True) + "\n"
            (out_dir / "results.json").write_text(text)
            (out_dir / "report.md").write_text(render_report(results))
        run.summary.results = results
        return run.summary


def render_report(results):
    lines = [f"# Experiment report (seed {results['seed']})", "",
             f"Dataset: {results['dataset']['name']}, {results['dataset']['n_train']} train / "
             f"{results['dataset']['n_test']} test samples.", "", "## Classifiers", "",
             "| model | architecture | clean test accuracy |", "|---|---|---|"]
    for name, m in results["models"].items():
        lines.append(f"| {name} | {m['spec']} | {m['clean_test_accuracy']['value']:.4f} |")
    if results["attacks"]:
        lines += ["", "## Attacks", "", "| attack | source | success rate | mean l2 norm |", "|---|---|---|---|"]
        for name, a in results["attacks"].items():
            lines.append(f"| {name} | {a['source']} | {a['success_rate']:.4f} | {a['mean_norm']:.4f} |")
    if results["defenses"]:
        lines += ["", "## Defenses", "", "| defense | key | clean test MSE |", "|---|---|---|"]
        for name, d in results["defenses"].items():
            lines.append(f"| {name} | {d['key']} | {d['clean_test_mse']:.5f} |")
    if results["scenarios"]:
        lines += ["", "## Scenarios", "", format_report(results["scenarios"], "md").rstrip()]
        flagged = [s for s in results["scenarios"] if s["flags"]]
        if flagged:
            lines += ["", "Flags:"]
            for s in flagged:
                lines.append(f"- {s['name']}: {', '.join(s['flags'])}")
    return "\n".join(lines) + "\n"


__all__ = ["EXIT_CODES", "RunSummary", "load_config", "prepare_config", "render_report", "run_experiment"]
