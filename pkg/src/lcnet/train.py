"""Toy-scale training: SGD with momentum and coupled weight decay, cosine
learning-rate schedule with linear warmup, softmax cross-entropy, horizontal
flip augmentation, on a synthetic blob dataset.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .arch import LCNetConfig, Model, build_model, run_layers
from .autodiff import cross_entropy, model_backward
from .errors import ShapeMismatchError


@dataclass(frozen=True)
class ScheduleCfg:
    base_lr: float
    warmup_epochs: int
    total_epochs: int
    steps_per_epoch: int

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def lr_at(cfg: ScheduleCfg, step: int) -> float:
    """Learning rate for a 0-based global step.

    Linear warmup reaches ``base_lr`` on the last warmup step; the cosine
    phase then decays from ``base_lr`` over the remaining steps.
    """
    if not 0 <= step < cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps})")
    warmup = cfg.warmup_steps
    if step < warmup:
        return cfg.base_lr * ((step + 1) / warmup)
    t = step - warmup
    T = cfg.total_steps - warmup
    return 0.5 * cfg.base_lr * (1 + math.cos(math.pi * t / T))


@dataclass
class OptState:
    momentum: float = 0.9
    weight_decay: float = 3e-5
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def decays(name: str) -> bool:
    """Biases and BN scale/shift are exempt from weight decay."""
    return not name.endswith((".bias", ".gamma", ".beta"))


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], opt: OptState, lr: float) -> None:
    """Heavy-ball SGD update, in place on ``params`` and ``opt.velocity``.

    ``g' = g + wd * p``; ``v = momentum * v + g'``; ``p -= lr * v``.
    """
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatchError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if opt.weight_decay and decays(name):
            g = g + p.dtype.type(opt.weight_decay) * p
        v = opt.velocity.get(name)
        if v is None:
            v = opt.velocity[name] = np.zeros_like(p)
        if v.shape != p.shape:
            raise ShapeMismatchError(f"{name}: velocity shape {v.shape} != parameter shape {p.shape}")
        v *= p.dtype.type(opt.momentum)
        v += g
        p -= p.dtype.type(lr) * v


@dataclass
class SynthDataset:
    """Class-dependent coloured Gaussian blobs on noise.

    Class identity is carried by the blob's colour; its position is jittered
    per sample, so horizontal flips preserve the label.
    """

    seed: int = 0
    num_classes: int = 3
    num_samples: int = 384
    hw: int = 32
    noise: float = 0.5
    images: np.ndarray = field(init=False, repr=False)
    labels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        k, n, hw = self.num_classes, self.num_samples, self.hw
        # well-separated class colours: rows of a random orthogonal-ish basis
        colours = rng.standard_normal((k, 3))
        colours /= np.linalg.norm(colours, axis=1, keepdims=True)
        labels = rng.permutation(np.arange(n) % k)
        yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
        sigma = hw / 6
        centres = rng.uniform(hw / 4, 3 * hw / 4, (n, 2))
        blobs = np.exp(-((yy - centres[:, 0, None, None]) ** 2 + (xx - centres[:, 1, None, None]) ** 2) / (2 * sigma**2))
        images = 2.0 * colours[labels][:, :, None, None] * blobs[:, None]
        images += self.noise * rng.standard_normal(images.shape)
        self.images = images.astype(np.float32)
        self.labels = labels.astype(np.int64)

    def __len__(self) -> int:
        return self.num_samples


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


def history_csv(history: list[EpochStats]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "loss", "accuracy"])
    for row in history:
        writer.writerow([row.epoch, repr(row.loss), repr(row.accuracy)])
    return buf.getvalue()


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int, workers: int = 1) -> tuple[float, float]:
    """Mean loss and accuracy over fixed, unaugmented batches.

    Normalisation uses batch statistics and dropout is off, so the result
    depends only on the parameters.
    """
    total_loss, correct, seen = 0.0, 0, 0
    n = len(labels) // batch_size * batch_size
    for start in range(0, n, batch_size):
        xb = images[start:start + batch_size]
        yb = labels[start:start + batch_size]
        logits = run_layers(model, xb, "train", workers=workers, use_dropout=False)
        loss, _ = cross_entropy(logits, yb)
        total_loss += loss * len(yb)
        correct += int((logits.argmax(axis=1) == yb).sum())
        seen += len(yb)
    return total_loss / seen, correct / seen


@dataclass
class TrainResult:
    model: Model
    history: list[EpochStats]


def train_toy(
    config: LCNetConfig,
    data: SynthDataset,
    schedule: ScheduleCfg,
    opt: Optional[OptState] = None,
    seed: int = 0,
    *,
    batch_size: int = 32,
    workers: int = 1,
    on_epoch: Optional[Callable[[EpochStats], None]] = None,
) -> TrainResult:
    """Train a freshly initialised model and record per-epoch loss/accuracy."""
    opt = opt or OptState()
    n = len(data)
    if batch_size < 2 or n // batch_size != schedule.steps_per_epoch:
        raise ValueError(f"steps_per_epoch must equal {n} // batch_size = {n // max(batch_size, 1)}, and batch_size >= 2")
    model = build_model(config, seed)
    rng = np.random.default_rng([seed, 2])
    history: list[EpochStats] = []
    step = 0
    for epoch in range(1, schedule.total_epochs + 1):
        order = rng.permutation(n)
        for b in range(schedule.steps_per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            xb = data.images[idx]
            flip = rng.random(batch_size) < 0.5
            xb[flip] = xb[flip][..., ::-1]
            loss, tape = model_backward(model, xb, data.labels[idx], seed=[seed, step], workers=workers)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss {loss} at epoch {epoch}, step {step}")
            model.params.update(tape.stat_updates)
            sgd_step(model.params, tape.grads, opt, lr_at(schedule, step))
            step += 1
        loss, acc = evaluate(model, data.images, data.labels, batch_size, workers)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite evaluation loss at epoch {epoch}")
        stats = EpochStats(epoch, loss, acc)
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    return TrainResult(model, history)
