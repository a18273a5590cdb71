"""White-box L-inf gradient attacks: FGSM, PGD, MI-FGSM and the adaptive attack.

Every attack works on a numpy batch ``x`` of shape [N, 3, H, W] in [0, 1]
and returns an :class:`AdversarialExample` holding the whole batch.
Models and defenses are plain callables mapping a ``Tensor`` to a ``Tensor``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from advlab import checkpoint
from advlab.rng import make_rng
from advlab.tensor import Tensor, backward, frozen, no_grad, softmax_cross_entropy

LossFn = Callable[[Tensor, np.ndarray], Tensor]


class UnsupportedDefenseError(TypeError):
    """The defense does not propagate gradients to its input."""


@dataclass
class AttackConfig:
    epsilon: float
    steps: int = 10
    step_size: float | None = None
    decay_mu: float = 1.0
    targeted: bool = False
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.decay_mu < 0:
            raise ValueError("decay_mu must be >= 0")

    def alpha(self, default_fraction: float) -> float:
        return self.step_size if self.step_size is not None else self.epsilon * default_fraction


def pgd_config(epsilon: float, **kw) -> AttackConfig:
    """PGD defaults: 10 steps of eps/4 from a random start."""
    kw.setdefault("steps", 10)
    kw.setdefault("random_start", True)
    if "step_size" not in kw and epsilon > 0:
        kw["step_size"] = epsilon / 4
    return AttackConfig(epsilon=epsilon, **kw)


def mi_fgsm_config(epsilon: float, **kw) -> AttackConfig:
    """MI-FGSM defaults: mu = 1, step eps/steps, no random start."""
    kw.setdefault("steps", 10)
    kw.setdefault("decay_mu", 1.0)
    if "step_size" not in kw and epsilon > 0:
        kw["step_size"] = epsilon / kw["steps"]
    return AttackConfig(epsilon=epsilon, **kw)


@dataclass
class AdversarialExample:
    """A batch of benign inputs ``x`` and their attacked versions ``x_star = x + eta``."""

    x: np.ndarray
    x_star: np.ndarray
    labels: np.ndarray
    attack: str
    config: AttackConfig
    target: np.ndarray | None = None
    zero_gradient: np.ndarray | None = None
    eta: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.x.shape != self.x_star.shape:
            raise ValueError(f"x {self.x.shape} and x_star {self.x_star.shape} differ in shape")
        self.eta = self.x_star - self.x

    def __len__(self):
        return len(self.x)

    def subset(self, index) -> "AdversarialExample":
        pick = lambda a: None if a is None else a[index]  # noqa: E731
        return AdversarialExample(
            self.x[index], self.x_star[index], self.labels[index], self.attack, self.config,
            pick(self.target), pick(self.zero_gradient),
        )


def perturbation_of(pair: AdversarialExample) -> np.ndarray:
    return pair.x_star - pair.x


def _params_of(*objs) -> list:
    out = []
    for obj in objs:
        params = getattr(obj, "params", None)
        if params:
            out.extend(params.values())
    return out


def _default_loss(out: Tensor, labels: np.ndarray) -> Tensor:
    return softmax_cross_entropy(out, labels, reduction="sum")


def input_gradient(model: Callable, x: np.ndarray, labels: np.ndarray, loss_fn: LossFn | None = None):
    """Gradient of the summed attack loss w.r.t. ``x``.

    Returns ``(grad, output, connected)``; ``connected`` is False when no
    recorded path links the loss to the input (grad is then all zeros).
    """
    loss_fn = loss_fn or _default_loss
    xt = Tensor(np.array(x, dtype=np.float32), requires_grad=True)
    with frozen(_params_of(model)):
        out = model(xt)
        if not isinstance(out, Tensor):
            raise UnsupportedDefenseError(f"model returned {type(out).__name__}, not a Tensor")
        loss = loss_fn(out, labels)
        backward(loss)
    if xt.grad is None:
        return np.zeros_like(xt.data), out.data, False
    return xt.grad, out.data, True


def _project(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def _check_inputs(x: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if x.ndim != 4 or len(labels) != len(x):
        raise ValueError(f"expected [N,C,H,W] inputs with N labels, got {x.shape} and {labels.shape}")
    return x, labels


def _loss_labels(labels, target, cfg):
    if cfg.targeted:
        if target is None:
            raise ValueError("targeted attack needs target labels")
        return np.asarray(target, dtype=np.int64).reshape(-1), -1.0
    return labels, 1.0


def fgsm(model, x, labels, cfg: AttackConfig, target=None, loss_fn: LossFn | None = None) -> AdversarialExample:
    """Single step ``x + eps * sign(grad)`` clipped to [0, 1]."""
    x, labels = _check_inputs(x, labels)
    lbl, direction = _loss_labels(labels, target, cfg)
    grad, _, _ = input_gradient(model, x, lbl, loss_fn)
    sign = np.sign(grad).astype(np.float32) * direction
    x_star = np.clip(x + cfg.epsilon * sign, 0.0, 1.0)
    zero = ~np.any(grad.reshape(len(x), -1) != 0, axis=1)
    return AdversarialExample(x, x_star, labels, "fgsm", dataclasses.replace(cfg), target, zero)


def pgd(
    model, x, labels, cfg: AttackConfig, target=None, loss_fn: LossFn | None = None,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> AdversarialExample:
    """Projected sign-gradient ascent inside the eps-ball intersected with [0, 1].

    ``callback(t, x_t)`` sees every iterate, including the start point at t=0.
    """
    x, labels = _check_inputs(x, labels)
    lbl, direction = _loss_labels(labels, target, cfg)
    eps = cfg.epsilon
    alpha = cfg.alpha(0.25)
    x_adv = x
    if cfg.random_start and eps > 0:
        noise = make_rng(cfg.seed).uniform(-eps, eps, size=x.shape).astype(np.float32)
        x_adv = np.clip(x + noise, 0.0, 1.0)
    if callback:
        callback(0, x_adv)
    zero = None
    for t in range(cfg.steps):
        grad, _, _ = input_gradient(model, x_adv, lbl, loss_fn)
        if zero is None:
            zero = ~np.any(grad.reshape(len(x), -1) != 0, axis=1)
        x_adv = _project(x_adv + alpha * (np.sign(grad).astype(np.float32) * direction), x, eps)
        if callback:
            callback(t + 1, x_adv)
    return AdversarialExample(x, x_adv, labels, "pgd", dataclasses.replace(cfg), target, zero)


def mi_fgsm(
    model, x, labels, cfg: AttackConfig, target=None, loss_fn: LossFn | None = None,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> AdversarialExample:
    """Momentum iterative FGSM: ``g <- mu g + grad / ||grad||_1``, step along sign(g)."""
    x, labels = _check_inputs(x, labels)
    lbl, direction = _loss_labels(labels, target, cfg)
    eps = cfg.epsilon
    alpha = cfg.alpha(1.0 / cfg.steps)
    x_adv = x
    if cfg.random_start and eps > 0:
        noise = make_rng(cfg.seed).uniform(-eps, eps, size=x.shape).astype(np.float32)
        x_adv = np.clip(x + noise, 0.0, 1.0)
    if callback:
        callback(0, x_adv)
    momentum = np.zeros_like(x)
    zero = None
    for t in range(cfg.steps):
        grad, _, _ = input_gradient(model, x_adv, lbl, loss_fn)
        flat = grad.reshape(len(x), -1)
        if zero is None:
            zero = ~np.any(flat != 0, axis=1)
        l1 = np.abs(flat).sum(axis=1).reshape(-1, 1, 1, 1) + 1e-12
        momentum = cfg.decay_mu * momentum + grad / l1
        x_adv = _project(x_adv + alpha * (np.sign(momentum).astype(np.float32) * direction), x, eps)
        if callback:
            callback(t + 1, x_adv)
    return AdversarialExample(x, x_adv, labels, "mi_fgsm", dataclasses.replace(cfg), target, zero)


ATTACKS = {"fgsm": fgsm, "pgd": pgd, "mi_fgsm": mi_fgsm}


def default_config(name: str, epsilon: float, **kw) -> AttackConfig:
    if name == "pgd":
        return pgd_config(epsilon, **kw)
    if name == "mi_fgsm":
        return mi_fgsm_config(epsilon, **kw)
    if name == "fgsm":
        kw.setdefault("steps", 1)
        return AttackConfig(epsilon=epsilon, **kw)
    raise KeyError(f"unknown attack {name!r}")


def run_attack(name: str, model, x, labels, cfg: AttackConfig, target=None) -> AdversarialExample:
    try:
        fn = ATTACKS[name]
    except KeyError:
        raise KeyError(f"unknown attack {name!r}; choose from {sorted(ATTACKS)}") from None
    return fn(model, x, labels, cfg, target=target)


def _compose(model, defense):
    if defense is None:
        return model

    def pipeline(x):
        return model(defense(x))

    pipeline.params = {f"m{i}": p for i, p in enumerate(_params_of(model, defense))}
    return pipeline


def adaptive_attack(model, defense, x, target, cfg: AttackConfig, labels=None):
    """Targeted PGD through ``model(defense(x))``.

    Returns the example batch and a boolean success trace of shape
    [steps + 1, N]; row 0 is the starting point. Success latches: an input
    that reaches the target is frozen at that iterate.
    """
    x = np.asarray(x, dtype=np.float32)
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    labels = target if labels is None else np.asarray(labels, dtype=np.int64).reshape(-1)
    x, labels = _check_inputs(x, labels)
    pipeline = _compose(model, defense)
    eps = cfg.epsilon
    alpha = cfg.alpha(0.25)
    x_adv = x.copy()
    if cfg.random_start and eps > 0:
        noise = make_rng(cfg.seed).uniform(-eps, eps, size=x.shape).astype(np.float32)
        x_adv = np.clip(x + noise, 0.0, 1.0)

    trace = np.zeros((cfg.steps + 1, len(x)), dtype=bool)
    done = np.zeros(len(x), dtype=bool)
    for t in range(cfg.steps + 1):
        grad, out, connected = input_gradient(pipeline, x_adv, target)
        if not connected:
            raise UnsupportedDefenseError("no gradient reaches the input through the defense")
        done |= np.argmax(out, axis=1) == target
        trace[t] = done
        if t == cfg.steps or done.all():
            trace[t:] = done
            break
        stepped = _project(x_adv - alpha * np.sign(grad).astype(np.float32), x, eps)
        x_adv = np.where(done[:, None, None, None], x_adv, stepped)
    cfg = dataclasses.replace(cfg, targeted=True)
    return AdversarialExample(x, x_adv, labels, "adaptive_pgd", cfg, target), trace


def predictions(model, x: np.ndarray, defense=None, batch_size: int = 256) -> np.ndarray:
    pipeline = _compose(model, defense)
    out = []
    with no_grad():
        for s in range(0, len(x), batch_size):
            out.append(np.argmax(pipeline(Tensor(np.asarray(x[s : s + batch_size], dtype=np.float32))).data, axis=1))
    return np.concatenate(out)


def attack_success_rate(model, defense, examples: AdversarialExample) -> float:
    """Misclassification rate (untargeted) or hit rate on the target (targeted)."""
    if len(examples) == 0:
        raise ValueError("success rate of an empty example set is undefined")
    pred = predictions(model, examples.x_star, defense)
    if examples.config.targeted:
        return float(np.mean(pred == examples.target))
    return float(np.mean(pred != examples.labels))


def save_adversarial(ex: AdversarialExample, path) -> None:
    checkpoint.write_container(
        path, {"x": ex.x, "x_star": ex.x_star, "labels": ex.labels.astype(np.float32)},
        fingerprint=f"ADV-v1;attack={ex.attack};eps={ex.config.epsilon:.8g}",
    )


def load_adversarial(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(x, x_star, labels)`` from a saved adversarial batch."""
    _, t = checkpoint.read_container(path)
    missing = {"x", "x_star", "labels"} - set(t)
    if missing:
        raise checkpoint.CheckpointError(f"{path}: missing {sorted(missing)}")
    return t["x"], t["x_star"], t["labels"].astype(np.int64)
