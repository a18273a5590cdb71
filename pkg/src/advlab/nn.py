"""Parameter containers and the shared training loop."""

from __future__ import annotations

import logging
import math
from typing import Callable

import numpy as np

from advlab.tensor import AdamState, Tensor, adam_step, backward, conv2d, default_dtype

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, trace: list[float]):
        super().__init__(f"loss became non-finite at step {step} (last finite: {next((v for v in reversed(trace) if math.isfinite(v)), None)})")
        self.step = step
        self.trace = trace


class Model:
    """Base class: ``params`` maps stable names to leaf tensors."""

    fingerprint = "model"

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def add_conv(self, name: str, cin: int, cout: int, k: int, rng: np.random.Generator) -> None:
        bound = math.sqrt(6.0 / (cin * k * k))
        self.params[f"{name}.weight"] = Tensor(
            rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(default_dtype()), requires_grad=True
        )
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=default_dtype()), requires_grad=True)

    def add_linear(self, name: str, din: int, dout: int, rng: np.random.Generator) -> None:
        bound = math.sqrt(6.0 / din)
        self.params[f"{name}.weight"] = Tensor(
            rng.uniform(-bound, bound, size=(dout, din)).astype(default_dtype()), requires_grad=True
        )
        self.params[f"{name}.bias"] = Tensor(np.zeros(dout, dtype=default_dtype()), requires_grad=True)

    def conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        w = self.params[f"{name}.weight"]
        return conv2d(x, w, self.params[f"{name}.bias"], stride=stride, padding=w.shape[-1] // 2)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}


def fit(
    params: list[Tensor],
    loss_fn: Callable[[np.ndarray, np.ndarray, int], Tensor],
    batches: Callable[[int], list],
    epochs: int,
    adam: AdamState,
    lr_schedule: Callable[[int], float] | None = None,
    max_steps: int | None = None,
) -> list[float]:
    """Generic Adam loop. ``batches(epoch)`` returns that epoch's batch list."""
    trace: list[float] = []
    step = 0
    for epoch in range(epochs):
        for xb, yb in batches(epoch):
            if max_steps is not None and step >= max_steps:
                return trace
            if lr_schedule is not None:
                adam.lr = lr_schedule(step)
            loss = loss_fn(xb, yb, step)
            value = float(loss.data)
            trace.append(value)
            if not math.isfinite(value):
                raise TrainingDiverged(step, trace)
            backward(loss)
            adam_step(params, adam)
            step += 1
        log.debug("epoch %d done, last loss %.4f", epoch, trace[-1] if trace else float("nan"))
    return trace
