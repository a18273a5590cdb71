"""Small fixed-architecture CNN used as the attack target."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from advlab import checkpoint
from advlab.data import Dataset, batch_indices
from advlab.nn import Model, fit
from advlab.rng import derive_seed, make_rng
from advlab.tensor import (
    AdamState,
    Tensor,
    global_avg_pool,
    linear,
    no_grad,
    relu,
    softmax_cross_entropy,
)


@dataclass
class ClassifierConfig:
    side: int = 32
    classes: int = 10
    widths: tuple = (32, 64, 128)
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths:
            raise ValueError("widths must be non-empty")
        if self.side % (2 ** len(self.widths)):
            raise ValueError(f"side {self.side} is not divisible by 2^{len(self.widths)}")
        if self.classes < 2:
            raise ValueError("need at least two classes")


class CNN(Model):
    """``[conv3x3 -> relu -> conv3x3/2 -> relu]`` per stage, GAP, linear head."""

    def __init__(self, cfg: ClassifierConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = make_rng(seed)
        cin = 3
        for i, w in enumerate(cfg.widths):
            self.add_conv(f"stage{i}.conv_a", cin, w, 3, rng)
            self.add_conv(f"stage{i}.conv_b", w, w, 3, rng)
            cin = w
        self.add_linear("head", cin, cfg.classes, rng)

    @property
    def fingerprint(self) -> str:
        c = self.cfg
        return f"CNN-v1;side={c.side};classes={c.classes};widths={','.join(map(str, c.widths))}"

    def features(self, x: Tensor) -> Tensor:
        for i in range(len(self.cfg.widths)):
            x = relu(self.conv(f"stage{i}.conv_a", x))
            x = relu(self.conv(f"stage{i}.conv_b", x, stride=2))
        return x

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        h = global_avg_pool(self.features(x))
        return linear(h, self.params["head.weight"], self.params["head.bias"])


def build_cnn(cfg: ClassifierConfig, seed: int | None = None) -> CNN:
    return CNN(cfg, cfg.seed if seed is None else seed)


def train_classifier(model: CNN, ds: Dataset, cfg: ClassifierConfig) -> tuple[CNN, list[float]]:
    """Minimise softmax cross-entropy with Adam; returns the per-step loss trace."""
    if ds.images.shape[1:] != (3, cfg.side, cfg.side):
        raise ValueError(f"dataset images {ds.images.shape[1:]} do not match side {cfg.side}")
    if ds.class_count != cfg.classes:
        raise ValueError(f"dataset has {ds.class_count} classes, config expects {cfg.classes}")

    def batches(epoch):
        idx = batch_indices(len(ds), cfg.batch_size, derive_seed(cfg.seed, "classifier-epoch", epoch))
        return [(ds.images[i], ds.labels[i]) for i in idx]

    def loss_fn(xb, yb, step):
        return softmax_cross_entropy(model(Tensor(xb)), yb)

    adam = AdamState(lr=cfg.lr)
    trace = fit(model.parameters(), loss_fn, batches, cfg.epochs, adam)
    return model, trace


def predict(model: Callable, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax predictions for a numpy batch, evaluated without recording."""
    out = []
    with no_grad():
        for s in range(0, len(x), batch_size):
            out.append(np.argmax(model(Tensor(x[s : s + batch_size])).data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate_accuracy(
    model: Callable,
    batches: Iterable[tuple[np.ndarray, np.ndarray]],
    preprocess: Callable[[Tensor], Tensor] | None = None,
) -> float:
    correct = total = 0
    with no_grad():
        for xb, yb in batches:
            x = Tensor(np.asarray(xb, dtype=np.float32))
            if preprocess is not None:
                x = preprocess(x)
            pred = np.argmax(model(x).data, axis=1)
            correct += int((pred == np.asarray(yb)).sum())
            total += len(yb)
    return correct / total if total else 0.0


def save_checkpoint(model: Model, path) -> None:
    checkpoint.save_params(model, path)


def load_checkpoint(path, cfg: ClassifierConfig) -> CNN:
    return checkpoint.load_params(CNN(cfg, 0), path)
