"""Command line entry point: ``ensemble-dae <command>`` or ``python -m ensemble_dae``.

Heavy imports happen inside the commands so ``--threads`` can still set
the BLAS thread environment before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path


def _set_threads(n):
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _load_split(args, split, n=None):
    from .datasets import load_cifar10, load_mnist, make_synthetic
    from .errors import ConfigurationError

    if args.dataset == "synthetic":
        data = make_synthetic(n or 1000, seed=(args.seed or 0) * 2 + (split == "test"))
    elif args.dataset == "mnist":
        if not args.mnist_dir:
            raise ConfigurationError("--mnist-dir is required for the mnist dataset")
        data = load_mnist(args.mnist_dir, split)
    else:
        if not args.cifar_dir:
            raise ConfigurationError("--cifar-dir is required for the cifar10 dataset")
        data = load_cifar10(args.cifar_dir, split)
    return data.head(n) if n else data


def _out_dir(args):
    return Path(args.out_dir or ".")


def _resolve_model(ref, args, base=None):
    """A checkpoint path, or a name looked up as <out-dir>/<name>.ansm."""
    from .errors import ConfigurationError
    from .harness.checkpoint import load_checkpoint

    for candidate in (Path(ref), (base or Path(".")) / ref, _out_dir(args) / f"{ref}.ansm"):
        if candidate.is_file():
            return load_checkpoint(candidate)
    raise ConfigurationError(f"no checkpoint found for model {ref!r}")


def cmd_train_classifier(args):
    from .datasets import CIFAR_AUGMENT
    from .harness.checkpoint import save_checkpoint
    from .harness.pipeline import _default_train, resolve_train
    from .nn import build_model, evaluate_accuracy, get_preset, train

    spec = get_preset(args.preset)
    cfg = resolve_train(args.train_preset, _default_train(args.preset)).replace(seed=args.seed or 0)
    if args.epochs:
        cfg = cfg.replace(epochs=args.epochs)
    data = _load_split(args, "train", args.n_train)
    model = build_model(spec, args.seed or 0)
    _, history = train(model, data, cfg, CIFAR_AUGMENT if args.augment else None)
    model = model.quantized()
    model.meta = {"final_train_loss": history[-1]["loss"], "epochs": cfg.epochs}
    save_checkpoint(model, args.out)
    test = _load_split(args, "test", args.n_test)
    print(f"{spec.name}: test accuracy {evaluate_accuracy(model, test):.4f} -> {args.out}")


def cmd_gen_attack(args):
    from .attacks import AttackConfig, run_attack
    from .harness.checkpoint import save_checkpoint

    model = _resolve_model(args.model, args)
    params = json.loads(args.params) if args.params else {}
    if args.eps is not None:
        params["epsilon"] = args.eps
    cfg = AttackConfig(algorithm=args.algo, seed=args.seed or 0, **params)
    data = _load_split(args, args.split, args.n)
    batch = run_attack(model, data.images, data.labels, cfg)
    save_checkpoint(batch, args.out)
    print(f"{cfg.label()} on {model.name}: success {batch.success_rate:.4f}, "
          f"mean l2 norm {batch.norms.mean():.4f} -> {args.out}")


def _read_triples(path):
    from .errors import ConfigurationError

    doc = json.loads(Path(path).read_text())
    items = doc["attacks"] if isinstance(doc, dict) else doc
    out = []
    for item in items:
        if isinstance(item, dict):
            out.append((item["algorithm"], item["model"], item.get("epsilon")))
        elif isinstance(item, (list, tuple)) and len(item) in (2, 3):
            out.append((item[0], item[1], item[2] if len(item) == 3 else None))
        else:
            raise ConfigurationError(f"cannot read attack triple {item!r}")
    if not out:
        raise ConfigurationError("the attack ensemble is empty")
    return out


def cmd_train_dae(args):
    from .attacks import AttackConfig, run_attack
    from .defense import build_training_set, train_dae
    from .harness.checkpoint import save_checkpoint
    from .nn import TRAIN_PRESETS, get_preset

    triples = _read_triples(args.train_attacks)
    base = Path(args.train_attacks).parent
    data = _load_split(args, "train", args.n_train)
    batches = []
    for algorithm, ref, eps in triples:
        model = _resolve_model(ref, args, base)
        cfg = AttackConfig(algorithm=algorithm, seed=args.seed or 0, **({} if eps is None else {"epsilon": eps}))
        batches.append(run_attack(model, data.images, data.labels, cfg))
    spec = get_preset(args.arch)
    tcfg = TRAIN_PRESETS["cifar-dae" if args.arch == "cifar-dae" else "mnist-dae-desk"].replace(seed=args.seed or 0)
    if args.epochs:
        tcfg = tcfg.replace(epochs=args.epochs)
    tset = build_training_set(data.images, batches, args.seed or 0)
    dae, history = train_dae(tset, spec, tcfg, args.seed or 0)
    save_checkpoint(dae, args.out)
    print(f"{spec.name}: {len(tset)} training pairs, final loss {history[-1]['loss']:.5f} -> {args.out}")


def _run(args, config):
    from .harness.pipeline import run_experiment

    out_dir = _out_dir(args) if args.out_dir else Path(config).parent / "run"
    summary = run_experiment(config, out_dir, seed=args.seed, mnist_dir=args.mnist_dir, cifar_dir=args.cifar_dir)
    print(f"results: {out_dir / 'results.json'} ({len(summary.hits)} cached, {len(summary.misses)} computed)")
    return summary, out_dir


def cmd_run(args):
    from .errors import ConfigurationError

    if not args.config:
        raise ConfigurationError("run needs --config")
    _run(args, args.config)


def cmd_evaluate(args):
    _, out_dir = _run(args, args.scenario)
    if args.out:
        Path(args.out).write_text((out_dir / "results.json").read_text())


def cmd_report(args):
    from .evaluation import format_report

    results = json.loads(Path(args.input).read_text())
    text = format_report(results["scenarios"] if isinstance(results, dict) else results, args.format)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_dump_images(args):
    from .harness.checkpoint import load_checkpoint
    from .harness.images import dump_images

    batches = [load_checkpoint(p) for p in args.batch]
    path = dump_images(batches, args.out, n=args.n)
    print(f"wrote {path}")


# command -> (handler, stage used for the exit code)
COMMANDS = {
    "train-classifier": (cmd_train_classifier, "train"),
    "gen-attack": (cmd_gen_attack, "attack"),
    "train-dae": (cmd_train_dae, "train-dae"),
    "evaluate": (cmd_evaluate, "evaluate"),
    "report": (cmd_report, "report"),
    "dump-images": (cmd_dump_images, "images"),
    "run": (cmd_run, "config"),
}


def build_parser():
    def global_flags(default):
        # subcommands repeat the global flags with SUPPRESS so a value given
        # before the subcommand name is not reset to the default
        p = argparse.ArgumentParser(add_help=False, argument_default=default)
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--out-dir", help="output directory")
        p.add_argument("--mnist-dir", help="directory holding the MNIST IDX files")
        p.add_argument("--cifar-dir", help="directory holding the CIFAR-10 binary batches")
        p.add_argument("--threads", type=int, help="BLAS threads")
        p.add_argument("-v", "--verbose", action="store_true", default=default if default else False)
        return p

    common = global_flags(argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="ensemble-dae", parents=[global_flags(None)],
                                     description="Adversarial attacks and ensemble-trained DAE defenses.")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p):
        p.add_argument("--dataset", choices=("mnist", "cifar10", "synthetic"), default="mnist")

    p = sub.add_parser("train-classifier", parents=[common], help="train a classifier preset")
    p.add_argument("--preset", required=True)
    p.add_argument("--train-preset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--augment", action="store_true")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--out", required=True)
    data_args(p)

    p = sub.add_parser("gen-attack", parents=[common], help="attack a data split with one model")
    p.add_argument("--model", required=True, help="checkpoint path or name under --out-dir")
    p.add_argument("--algo", required=True, choices=("fgs", "deepfool", "cw"))
    p.add_argument("--eps", type=float)
    p.add_argument("--params", help="extra AttackConfig fields as JSON")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--n", type=int)
    p.add_argument("--out", required=True)
    data_args(p)

    p = sub.add_parser("train-dae", parents=[common], help="train a DAE on an attack ensemble")
    p.add_argument("--train-attacks", required=True, help="JSON list of (algorithm, model, epsilon) triples")
    p.add_argument("--arch", required=True, choices=("mnist-dae", "cifar-dae"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--out", required=True)
    data_args(p)

    p = sub.add_parser("evaluate", parents=[common], help="run an experiment config and store its results")
    p.add_argument("--scenario", required=True, help="experiment config (JSON)")
    p.add_argument("--out", help="copy results.json here")

    p = sub.add_parser("report", parents=[common], help="format results.json as a table")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=("csv", "json", "md"), default="md")
    p.add_argument("--out")

    p = sub.add_parser("dump-images", parents=[common], help="write clean/perturbed image grids")
    p.add_argument("--batch", required=True, nargs="+", help="adversarial batch checkpoints")
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--out", required=True)

    sub.add_parser("run", parents=[common], help="run the full pipeline from --config")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .errors import EnsembleDaeError, StageError
    from .harness.pipeline import EXIT_CODES

    handler, stage_name = COMMANDS[args.command]
    try:
        handler(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (EnsembleDaeError, OSError, ValueError, KeyError) as exc:
        print(f"error in {args.command}: {exc}", file=sys.stderr)
        return EXIT_CODES[stage_name]
    return 0


if __name__ == "__main__":
    sys.exit(main())
