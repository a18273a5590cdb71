"""Command-line entry point: ``advlab <subcommand> --config PATH [--seed N]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from advlab import harness
from advlab.acm import AcmModel, save_acm, train_acm
from advlab.attacks import predictions, run_attack, save_adversarial
from advlab.checkpoint import save_params
from advlab.classifier import build_cnn, load_checkpoint, save_checkpoint, train_classifier
from advlab.config import load_config, parse_value
from advlab.data import Dataset
from advlab.rng import derive_seed
from advlab.surgery import train_autoencoder

log = logging.getLogger("advlab")


def spread_subset(ds: Dataset, n: int) -> Dataset:
    """``n`` evenly strided items, so class-ordered data stays balanced."""
    if n >= len(ds):
        return ds
    return ds.subset(np.arange(n) * (len(ds) // n))


def _ensure_parent(path) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def cmd_train_classifier(cfg: harness.ExperimentConfig, seed: int | None) -> dict:
    ccfg = cfg.classifier
    if seed is not None:
        ccfg.seed = seed
    model, trace = train_classifier(build_cnn(ccfg), cfg.dataset.load("train"), ccfg)
    _ensure_parent(cfg.classifier_checkpoint)
    save_checkpoint(model, cfg.classifier_checkpoint)
    test = cfg.dataset.load("test")
    acc = float(np.mean(predictions(model, test.images) == test.labels))
    return {"checkpoint": cfg.classifier_checkpoint, "final_loss": trace[-1], "test_accuracy": acc}


def cmd_train_autoencoder(cfg: harness.ExperimentConfig, seed: int | None) -> dict:
    opts = {"epochs": 100, "lr": 1e-3, "batch_size": 32, "max_steps": None, "images": 400, "seed": 0} | cfg.autoencoder
    if "checkpoint" not in opts:
        raise ValueError("autoencoder.checkpoint is not set")
    ds = spread_subset(cfg.dataset.load("train"), int(opts["images"]))
    s = int(opts["seed"]) if seed is None else seed
    max_steps = None if opts["max_steps"] in (None, "") else int(opts["max_steps"])
    ae, trace = train_autoencoder(ds, int(opts["epochs"]), float(opts["lr"]), s, int(opts["batch_size"]), max_steps)
    _ensure_parent(opts["checkpoint"])
    save_params(ae, opts["checkpoint"])
    return {"checkpoint": opts["checkpoint"], "final_loss": trace[-1], "steps": len(trace)}


def cmd_train_acm(cfg: harness.ExperimentConfig, seed: int | None, only: str | None = None) -> dict:
    if not cfg.defenses:
        raise ValueError("no defense.<name> sections in the config")
    images = int(cfg.raw.get("acm_images", 400))
    ds = spread_subset(cfg.dataset.load("train"), images)
    out = {}
    for name, (acfg, path) in sorted(cfg.defenses.items()):
        if only and name != only:
            continue
        if seed is not None:
            acfg.seed = derive_seed(seed, "defense", name)
        model, trace = train_acm(AcmModel(acfg), ds, acfg)
        _ensure_parent(path)
        save_acm(model, path)
        out[name] = {"checkpoint": path, "final_loss": trace[-1], "steps": len(trace)}
    return out


def cmd_attack(cfg: harness.ExperimentConfig) -> dict:
    models = harness.Models(load_checkpoint(cfg.classifier_checkpoint, cfg.classifier))
    ds = harness.eval_subset(cfg, cfg.dataset.load("test"))
    os.makedirs(cfg.output, exist_ok=True)
    report = harness.ExperimentReport(metadata=harness._metadata(cfg))
    for attack in cfg.attacks:
        for eps in cfg.epsilons:
            seed = derive_seed(cfg.seed, cfg.experiment, attack, f"{eps:g}")
            pair = run_attack(attack, models.classifier, ds.images, ds.labels, harness.attack_config(cfg, attack, eps, seed))
            save_adversarial(pair, os.path.join(cfg.output, f"adv_{attack}_eps{eps:g}.plab"))
            acc = float(np.mean(predictions(models.classifier, pair.x_star) == ds.labels))
            report.add(cfg.experiment, attack, eps, "none", "accuracy", acc, len(ds), seed)
    return _emit(report, cfg, "attack")


def _emit(report: harness.ExperimentReport, cfg: harness.ExperimentConfig, stem: str) -> dict:
    os.makedirs(cfg.output, exist_ok=True)
    csv_path = os.path.join(cfg.output, f"{stem}.csv")
    harness.emit_report(report, "csv", csv_path)
    harness.emit_report(report, "json", os.path.join(cfg.output, f"{stem}.json"))
    return {"csv": csv_path, "rows": len(report.rows)}


def cmd_surgery(cfg: harness.ExperimentConfig) -> dict:
    cfg.conditions = [c for c in cfg.conditions if c == "none" or c.split(":")[0] in harness.SURGERY_PREFIXES]
    cfg.defenses = {}
    return _emit(harness.run_experiment(cfg), cfg, "surgery")


def cmd_evaluate(cfg: harness.ExperimentConfig) -> dict:
    return _emit(harness.run_experiment(cfg), cfg, "evaluate")


def cmd_adaptive(cfg: harness.ExperimentConfig) -> dict:
    report, _, etas = harness.adaptive_curve(cfg)
    eps = float(cfg.adaptive.get("epsilon", 8))
    for cond, value in harness.l2_report(etas).items():
        report.add(cfg.experiment, "adaptive_pgd", eps, cond, "l2_mean", value, len(etas[cond]), cfg.seed)
    return _emit(report, cfg, "adaptive")


def cmd_report(cfg: harness.ExperimentConfig) -> dict:
    return _emit(harness.full_report(cfg), cfg, "report")


def _override(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), parse_value(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advlab", description="Adversarial robustness laboratory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train-classifier": "train the CNN and save classifier.checkpoint",
        "train-autoencoder": "train the latent-surgery autoencoder",
        "train-acm": "train every defense.<name> ACM",
        "attack": "generate adversarial sets and their accuracy",
        "surgery": "evaluate the surgery conditions",
        "evaluate": "evaluate every condition (surgery and defenses)",
        "adaptive": "adaptive targeted attack curves and L2 norms",
        "report": "everything above except training, in one CSV/JSON",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override the seed")
        p.add_argument("--set", dest="overrides", type=_override, action="append", default=[], metavar="KEY=VALUE")
        if name == "train-acm":
            p.add_argument("--defense", default=None, help="train only this defense")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = dict(args.overrides)
    training = args.command.startswith("train-")
    if args.seed is not None and not training:
        overrides["seed"] = args.seed
    try:
        tree = load_config(args.config, overrides)
        cfg = harness.ExperimentConfig.from_tree(tree, base_dir=os.path.dirname(os.path.abspath(args.config)))
        if args.command == "train-classifier":
            result = cmd_train_classifier(cfg, args.seed)
        elif args.command == "train-autoencoder":
            result = cmd_train_autoencoder(cfg, args.seed)
        elif args.command == "train-acm":
            result = cmd_train_acm(cfg, args.seed, args.defense)
        else:
            result = {
                "attack": cmd_attack,
                "surgery": cmd_surgery,
                "evaluate": cmd_evaluate,
                "adaptive": cmd_adaptive,
                "report": cmd_report,
            }[args.command](cfg)
    except (OSError, ValueError, KeyError) as exc:
        print(f"advlab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(f"{args.command}: {result}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
