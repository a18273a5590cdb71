"""Experiment runner and report emitter.

An experiment crosses attacks x epsilons x conditions. For each
(attack, epsilon) pair the adversarial set is generated once; each
condition then maps it to classifier inputs and the accuracy is recorded.
Conditions are strings:

    none                      adversarial inputs as generated
    defense:<name>            through the ACM defined in ``defense.<name>.*``
    spatial_random:<ratio>    element-wise spatial removal
    spatial_patch:<ratio>     patch-wise spatial removal
    frequency:<B1+B2...>      remove the listed Haar bands (empty list allowed)
    latent_channel:<ratio>    channel-wise latent ablation (needs autoencoder)
    latent_spatial:<ratio>    spatial latent ablation (needs autoencoder)
    gaussian_control:<ratio>  benign inputs with sigma = epsilon noise

Every random choice uses ``derive_seed(global_seed, experiment, ...)``,
i.e. splitmix64 over the seed xor the FNV-1a hash of each name.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from advlab import __version__
from advlab.acm import AcmConfig, load_acm, tanh_histogram
from advlab.attacks import (
    AdversarialExample,
    adaptive_attack,
    default_config,
    predictions,
    run_attack,
)
from advlab.classifier import ClassifierConfig, load_checkpoint
from advlab.checkpoint import load_params
from advlab.config import as_list, config_hash
from advlab.data import Dataset, load_cifar10, synth_dataset
from advlab.rng import derive_seed, make_rng
from advlab.surgery import Autoencoder, SurgerySpec, apply_surgery
from advlab.wavelet import BANDS

log = logging.getLogger(__name__)

CSV_COLUMNS = ("experiment", "attack", "epsilon", "condition", "metric", "value", "n", "seed")
SURGERY_PREFIXES = ("spatial_random", "spatial_patch", "frequency", "latent_channel", "latent_spatial", "gaussian_control")


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


@dataclass
class DatasetSpec:
    kind: str = "synth"
    classes: int = 10
    side: int = 16
    contrast: float = 0.1
    noise_std: float = 0.05
    train_per_class: int = 200
    train_seed: int = 0
    test_per_class: int = 50
    test_seed: int = 1
    train_paths: list = field(default_factory=list)
    test_paths: list = field(default_factory=list)

    def load(self, split: str) -> Dataset:
        if self.kind == "synth":
            n, seed = (self.train_per_class, self.train_seed) if split == "train" else (self.test_per_class, self.test_seed)
            return synth_dataset(self.classes, n, self.side, seed, self.contrast, self.noise_std)
        if self.kind == "cifar10":
            paths = self.train_paths if split == "train" else self.test_paths
            return load_cifar10(as_list(paths))
        raise ValueError(f"unknown dataset kind {self.kind!r}")


def _build(cls, section: dict | None, **extra):
    """Instantiate a dataclass from a config section, rejecting unknown keys."""
    section = dict(section or {})
    section.update(extra)
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    for key in ("widths", "train_paths", "test_paths"):
        if key in section:
            section[key] = as_list(section[key])
    return cls(**section)


def acm_config_from(section: dict | None) -> AcmConfig:
    section = dict(section or {})
    section.pop("checkpoint", None)
    off = {b: False for b in as_list(section.pop("disable", []))}
    bad = set(off) - set(BANDS)
    if bad:
        raise ValueError(f"unknown bands in disable: {sorted(bad)}")
    return _build(AcmConfig, section, band_enabled=off)


@dataclass
class ExperimentConfig:
    experiment: str = "experiment"
    seed: int = 0
    samples: int = 500
    output: str = "out"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    classifier_checkpoint: str = "classifier.plab"
    attacks: list = field(default_factory=lambda: ["pgd"])
    epsilons: list = field(default_factory=lambda: [1, 2, 4, 8])
    attack_overrides: dict = field(default_factory=dict)
    conditions: list = field(default_factory=lambda: ["none"])
    defenses: dict = field(default_factory=dict)  # name -> (AcmConfig, checkpoint path)
    autoencoder: dict = field(default_factory=dict)
    adaptive: dict = field(default_factory=dict)
    histogram: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")

    @classmethod
    def from_tree(cls, tree: dict, base_dir: str | os.PathLike = ".") -> "ExperimentConfig":
        t = dict(tree)

        def path(p):
            return p if p is None or os.path.isabs(str(p)) else os.path.join(base_dir, str(p))

        clf = dict(t.get("classifier", {}))
        clf_path = clf.pop("checkpoint", "classifier.plab")
        defenses = {}
        for name, sec in t.get("defense", {}).items():
            defenses[name] = (acm_config_from(sec), path(sec.get("checkpoint", f"acm_{name}.plab")))
        ae = dict(t.get("autoencoder", {}))
        if "checkpoint" in ae:
            ae["checkpoint"] = path(ae["checkpoint"])
        dataset = dict(t.get("dataset", {}))
        for key in ("train_paths", "test_paths"):
            if key in dataset:
                dataset[key] = [path(p) for p in as_list(dataset[key])]
        return cls(
            experiment=str(t.get("experiment", "experiment")),
            seed=int(t.get("seed", 0)),
            samples=int(t.get("samples", 500)),
            output=path(t.get("output", "out")),
            dataset=_build(DatasetSpec, dataset),
            classifier=_build(ClassifierConfig, clf),
            classifier_checkpoint=path(clf_path),
            attacks=[str(a) for a in as_list(t.get("attacks", "pgd"))],
            epsilons=[float(e) for e in as_list(t.get("epsilons", [1, 2, 4, 8]))],
            attack_overrides=dict(t.get("attack", {})),
            conditions=[str(c) for c in as_list(t.get("conditions", "none"))],
            defenses=defenses,
            autoencoder=ae,
            adaptive=dict(t.get("adaptive", {})),
            histogram=dict(t.get("histogram", {})),
            raw=tree,
        )

    def validate(self) -> None:
        """Check that every referenced checkpoint exists."""
        needed = [self.classifier_checkpoint]
        for cond in self.conditions:
            kind, _, arg = cond.partition(":")
            if kind == "defense":
                if arg not in self.defenses:
                    raise ValueError(f"condition {cond!r} names an undefined defense")
                needed.append(self.defenses[arg][1])
            elif kind.startswith("latent"):
                needed.append(self.autoencoder.get("checkpoint", "<autoencoder.checkpoint unset>"))
            elif kind not in ("none",) + SURGERY_PREFIXES:
                raise ValueError(f"unknown condition {cond!r}")
        missing = [p for p in dict.fromkeys(needed) if not os.path.exists(p)]
        if missing:
            raise FileNotFoundError(f"missing checkpoints: {missing}")


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class Row:
    experiment: str
    attack: str
    epsilon: float  # 8-bit scale, i.e. k for a radius of k/255
    condition: str
    metric: str
    value: float
    n: int
    seed: int
    error: str | None = None

    def as_csv(self) -> list[str]:
        eps = f"{self.epsilon:g}"
        value = "nan" if self.value is None or math.isnan(self.value) else f"{self.value:.4f}"
        return [self.experiment, self.attack, eps, self.condition, self.metric, value, str(self.n), str(self.seed)]


@dataclass
class ExperimentReport:
    rows: list[Row] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, *args, **kw) -> Row:
        row = Row(*args, **kw)
        self.rows.append(row)
        return row

    def find(self, **match) -> list[Row]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]

    def value(self, **match) -> float:
        rows = self.find(**match)
        if len(rows) != 1:
            raise KeyError(f"{len(rows)} rows match {match}")
        return rows[0].value

    def extend(self, other: "ExperimentReport") -> None:
        self.rows.extend(other.rows)


def emit_report(report: ExperimentReport, fmt: str, path) -> None:
    """Write ``report`` as CSV (rows only) or JSON (rows plus metadata)."""
    try:
        if fmt == "csv":
            buf = io.StringIO()
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            writer.writerows(r.as_csv() for r in report.rows)
            text = buf.getvalue()
        elif fmt == "json":
            rows = []
            for r in report.rows:
                d = dict(zip(CSV_COLUMNS, r.as_csv()))
                d.update(epsilon=r.epsilon, value=None if math.isnan(r.value) else round(r.value, 4), n=r.n, seed=r.seed)
                if r.error:
                    d["error"] = r.error
                rows.append(d)
            text = json.dumps({"metadata": report.metadata, "rows": rows}, indent=2, sort_keys=True) + "\n"
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def parse_csv_report(path) -> list[Row]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        return [
            Row(e, a, float(eps), c, m, float(v), int(n), int(s))
            for e, a, eps, c, m, v, n, s in reader
        ]


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


@dataclass
class Models:
    classifier: Callable
    defenses: dict = field(default_factory=dict)
    autoencoder: Autoencoder | None = None


def load_models(cfg: ExperimentConfig) -> Models:
    cfg.validate()
    clf = load_checkpoint(cfg.classifier_checkpoint, cfg.classifier)
    defenses = {name: load_acm(p, acfg) for name, (acfg, p) in cfg.defenses.items() if os.path.exists(p)}
    ae = None
    if "checkpoint" in cfg.autoencoder and os.path.exists(cfg.autoencoder["checkpoint"]):
        ae = load_params(Autoencoder(), cfg.autoencoder["checkpoint"])
    return Models(clf, defenses, ae)


def eval_subset(cfg: ExperimentConfig, ds: Dataset, n: int | None = None, name: str = "eval") -> Dataset:
    """Seeded subset of the test split (all of it when it is small enough)."""
    n = min(n or cfg.samples, len(ds))
    if n == len(ds):
        return ds
    idx = np.sort(make_rng(derive_seed(cfg.seed, cfg.experiment, name)).choice(len(ds), size=n, replace=False))
    return ds.subset(idx)


def attack_config(cfg: ExperimentConfig, attack: str, eps: float, seed: int):
    over = dict(cfg.attack_overrides.get(attack, {}))
    return default_config(attack, eps / 255, seed=seed, **over)


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------


def _condition_inputs(cond: str, pair: AdversarialExample, models: Models, eps: float, seed: int):
    """Return ``(inputs, defense)`` for one condition."""
    kind, _, arg = cond.partition(":")
    if kind == "none":
        return pair.x_star, None
    if kind == "defense":
        if arg not in models.defenses:
            raise KeyError(f"defense {arg!r} is not loaded")
        return pair.x_star, models.defenses[arg]
    if kind == "frequency":
        bands = frozenset(b for b in arg.split("+") if b)
        return apply_surgery(SurgerySpec("frequency", band_mask=bands, seed=seed), pair), None
    if kind in SURGERY_PREFIXES:
        spec = SurgerySpec(kind, ratio=float(arg), sigma=eps / 255, seed=seed)
        return apply_surgery(spec, pair, models.autoencoder), None
    raise ValueError(f"unknown condition {cond!r}")


def run_experiment(cfg: ExperimentConfig, models: Models | None = None, data: Dataset | None = None) -> ExperimentReport:
    models = models or load_models(cfg)
    ds = eval_subset(cfg, data if data is not None else cfg.dataset.load("test"))
    x, y = ds.images, ds.labels
    report = ExperimentReport(metadata=_metadata(cfg))
    exp = cfg.experiment
    report.add(exp, "none", 0.0, "clean", "accuracy", float(np.mean(predictions(models.classifier, x) == y)), len(y), cfg.seed)
    for name in sorted(models.defenses):
        acc = float(np.mean(predictions(models.classifier, x, defense=models.defenses[name]) == y))
        report.add(exp, "none", 0.0, f"defense:{name}", "accuracy", acc, len(y), cfg.seed)
    for attack in cfg.attacks:
        for eps in cfg.epsilons:
            seed = derive_seed(cfg.seed, exp, attack, f"{eps:g}")
            try:
                pair = run_attack(attack, models.classifier, x, y, attack_config(cfg, attack, eps, seed))
            except Exception as exc:  # the cell fails, the run continues
                log.warning("attack %s eps=%g failed: %s", attack, eps, exc)
                for cond in cfg.conditions:
                    report.add(exp, attack, eps, cond, "accuracy", float("nan"), len(y), seed, error=repr(exc))
                continue
            for cond in cfg.conditions:
                cseed = derive_seed(seed, cond)
                try:
                    inputs, defense = _condition_inputs(cond, pair, models, eps, cseed)
                    acc = float(np.mean(predictions(models.classifier, inputs, defense=defense) == y))
                    report.add(exp, attack, eps, cond, "accuracy", acc, len(y), cseed)
                except Exception as exc:
                    log.warning("cell %s/%g/%s failed: %s", attack, eps, cond, exc)
                    report.add(exp, attack, eps, cond, "accuracy", float("nan"), len(y), cseed, error=repr(exc))
    return report


def _metadata(cfg: ExperimentConfig) -> dict:
    return {
        "config_hash": config_hash(cfg.raw) if cfg.raw else None,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "artifact_version": __version__,
        "epsilon_units": "k/255",
        "l2_protocol": "final iterate of every image, success or not",
    }


def adaptive_curve(
    cfg: ExperimentConfig, models: Models | None = None, data: Dataset | None = None, defense: str | None = None
) -> tuple[ExperimentReport, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Targeted adaptive PGD success per iteration, undefended vs defended.

    Returns the report, the success-rate curves (index t = after t steps)
    and the final perturbations per condition for :func:`l2_report`.
    """
    models = models or load_models(cfg)
    opts = {"samples": 200, "steps": 100, "epsilon": 8, "step_size": None, "random_start": False} | cfg.adaptive
    ds = eval_subset(cfg, data if data is not None else cfg.dataset.load("test"), int(opts["samples"]), "adaptive")
    eps = float(opts["epsilon"])
    seed = derive_seed(cfg.seed, cfg.experiment, "adaptive", f"{eps:g}")
    targets = make_rng(derive_seed(seed, "targets")).integers(0, cfg.classifier.classes, size=len(ds))
    step = float(opts["step_size"]) / 255 if opts["step_size"] else None
    acfg = default_config("pgd", eps / 255, steps=int(opts["steps"]), step_size=step, random_start=bool(opts["random_start"]), seed=seed)
    names = [defense] if defense else sorted(models.defenses)
    report = ExperimentReport(metadata=_metadata(cfg))
    curves, etas = {}, {}
    for cond in ["undefended"] + [f"defense:{n}" for n in names]:
        d = None if cond == "undefended" else models.defenses[cond.split(":", 1)[1]]
        ex, trace = adaptive_attack(models.classifier, d, ds.images, targets, acfg, labels=ds.labels)
        curve = trace.mean(axis=1)
        curves[cond], etas[cond] = curve, ex.eta
        for t, rate in enumerate(curve):
            report.add(cfg.experiment, "adaptive_pgd", eps, cond, f"success_rate@{t}", float(rate), len(ds), seed)
    return report, curves, etas


def l2_report(groups: dict[str, np.ndarray]) -> dict[str, float]:
    """Mean over examples of ``||eta||_2`` for each condition."""
    out = {}
    for cond, eta in groups.items():
        eta = np.asarray(eta, dtype=np.float64)
        if eta.size == 0 or len(eta) == 0:
            raise ValueError(f"condition {cond!r} has no examples")
        out[cond] = float(np.mean(np.sqrt(np.sum(eta.reshape(len(eta), -1) ** 2, axis=1))))
    return out


def histogram_report(cfg: ExperimentConfig, models: Models, data: Dataset | None = None) -> ExperimentReport:
    bins = int(cfg.histogram.get("bins", 20))
    ds = eval_subset(cfg, data if data is not None else cfg.dataset.load("test"), int(cfg.histogram.get("samples", 64)), "histogram")
    report = ExperimentReport(metadata=_metadata(cfg))
    edges = np.linspace(-1, 1, bins + 1)
    for name in sorted(models.defenses):
        counts = tanh_histogram(models.defenses[name], ds.images, bins=bins)
        total = max(int(counts.sum()), 1)
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            report.add(cfg.experiment, "none", 0.0, f"defense:{name}", f"tanh_fraction[{lo:+.2f},{hi:+.2f})", c / total, total, cfg.seed)
    return report


def full_report(cfg: ExperimentConfig, models: Models | None = None) -> ExperimentReport:
    """Robustness table, adaptive curves, L2 norms and tanh histograms in one report."""
    models = models or load_models(cfg)
    test = cfg.dataset.load("test")
    report = run_experiment(cfg, models, test)
    if cfg.adaptive.get("enabled", True):
        adaptive, _, etas = adaptive_curve(cfg, models, test)
        report.extend(adaptive)
        eps = float(adaptive.rows[0].epsilon) if adaptive.rows else 0.0
        for cond, value in l2_report(etas).items():
            report.add(cfg.experiment, "adaptive_pgd", eps, cond, "l2_mean", value, len(etas[cond]), cfg.seed)
    report.extend(histogram_report(cfg, models, test))
    return report
