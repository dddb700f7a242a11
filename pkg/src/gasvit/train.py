"""Tiny end-to-end training run on a synthetic planted-pattern task.

Each image is low-amplitude noise with one bright square planted in one of
the four quadrants; the quadrant index is the label. This only shows that
the composed network and its backward passes can be optimized; it says
nothing about accuracy on real data.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .arch import ArchitectureSpec, Model, backward, build, forward, forward_train, validate
from .errors import ConfigurationError


@dataclass
class ToyTask:
    num_classes: int = 4
    resolution: int = 32
    n_train: int = 64
    n_eval: int = 64
    seed: int = 0
    square: int = 6
    noise: float = 0.3

    def __post_init__(self):
        if self.num_classes != 4:
            raise ConfigurationError("the planted-quadrant task has exactly 4 classes")
        if self.resolution % 2 or self.square > self.resolution // 2:
            raise ConfigurationError("square must fit inside one quadrant")

    def _make(self, n: int, rng: np.random.Generator):
        r, half = self.resolution, self.resolution // 2
        x = (self.noise * rng.standard_normal((n, 3, r, r))).astype(tc.DTYPE)
        y = np.arange(n) % self.num_classes
        rng.shuffle(y)
        for i, label in enumerate(y):
            oy, ox = (label // 2) * half, (label % 2) * half
            dy, dx = rng.integers(0, half - self.square + 1, size=2)
            x[i, :, oy + dy:oy + dy + self.square, ox + dx:ox + dx + self.square] += 2.0
        return x, y.astype(np.int64)

    def generate(self):
        """Returns ``(x_train, y_train, x_eval, y_eval)``; deterministic per seed."""
        rng = np.random.default_rng(self.seed)
        return (*self._make(self.n_train, rng), *self._make(self.n_eval, rng))


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(logits.dtype)


@dataclass
class FitResult:
    losses: list[float]
    eval_accuracy: float
    diverged_at: int | None = None
    model: Model | None = field(default=None, repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["step", "loss"])
        for i, v in enumerate(self.losses):
            wr.writerow([i, repr(v)])
        return buf.getvalue()


def accuracy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    return float((forward(model, x).argmax(axis=1) == y).mean())


def fit(spec: ArchitectureSpec, task: ToyTask, steps: int = 200, lr: float = 0.03, seed: int = 0) -> FitResult:
    """Full-batch SGD on cross-entropy; ``losses[i]`` is the loss before update ``i``.

    Stops early and sets ``diverged_at`` if the loss becomes non-finite.
    """
    if spec.input_resolution != task.resolution or spec.head.num_classes != task.num_classes:
        raise ConfigurationError(
            f"spec expects {spec.input_resolution}px / {spec.head.num_classes} classes, "
            f"task has {task.resolution}px / {task.num_classes} classes"
        )
    rep = validate(spec)
    if not rep.feasible:
        raise ConfigurationError("spec is infeasible: " + "; ".join(rep.errors))
    model = build(spec, seed)
    params = model.parameters()
    xtr, ytr, xev, yev = task.generate()
    losses = []
    # overflow on a diverging run is reported through diverged_at instead
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(steps + 1):
            logits, cache = forward_train(model, xtr)
            loss, g = cross_entropy(logits, ytr)
            losses.append(loss)
            if not math.isfinite(loss):
                return FitResult(losses, float("nan"), diverged_at=step, model=model)
            if step == steps:
                break
            grads = backward(model, cache, g)
            for k, p in params.items():
                p -= lr * grads[k]
    return FitResult(losses, accuracy(model, xev, yev), model=model)
