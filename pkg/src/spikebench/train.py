"""Seeded training loop: AdamW with cosine learning-rate decay, evaluation and metrics."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .data import Dataset
from .errors import ConfigError, NumericError
from .network import SpikingTransformer
from .nn import Parameter
from .tensor import Tensor, no_grad

SCHEDULES = ("cosine", "constant")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    min_lr: float = 1e-5
    sched: str = "cosine"
    batch_size: int = 32
    val_batch_size: int = 128
    epochs: int = 20
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.05
    eps: float = 1e-8

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not self.lr > self.min_lr > 0:
            raise ConfigError(f"need lr > min_lr > 0, got lr={self.lr}, min_lr={self.min_lr}")
        if self.epochs < 1 or self.batch_size < 1 or self.val_batch_size < 1:
            raise ConfigError("epochs and batch sizes must be >= 1")
        if self.sched not in SCHEDULES:
            raise ConfigError(f"sched must be one of {SCHEDULES}, got {self.sched!r}")
        if not all(0 <= b < 1 for b in self.betas) or len(self.betas) != 2:
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


def cosine_lr(epoch: float, epochs: int, lr: float, min_lr: float) -> float:
    """``min_lr + (lr - min_lr) (1 + cos(pi e / E)) / 2``; equals ``lr`` at 0 and ``min_lr`` at ``E``."""
    if epoch <= 0:
        return lr
    if epoch >= epochs:
        return min_lr
    return min_lr + 0.5 * (lr - min_lr) * (1.0 + math.cos(math.pi * epoch / epochs))


class AdamW:
    """Adam with decoupled weight decay on parameters of rank >= 2 only.

    Frozen parameters (``requires_grad`` false) and parameters without a
    gradient are skipped and keep their moments untouched.
    """

    def __init__(self, params: list[Parameter], lr: float, betas=(0.9, 0.999), weight_decay: float = 0.05,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.weight_decay, self.eps = lr, tuple(betas), weight_decay, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = [0] * len(self.params)

    def step(self) -> None:
        b1, b2 = self.betas
        for i, p in enumerate(self.params):
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype)
            self.t[i] += 1
            t = self.t[i]
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1**t)
            v_hat = self.v[i] / (1 - b2**t)
            if p.ndim >= 2 and self.weight_decay:
                p.data -= (self.lr * self.weight_decay) * p.data
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float | None
    val_acc: float | None
    mean_rate: float


@dataclass
class TrainRun:
    epochs: list[EpochStats] = field(default_factory=list)
    checkpoint: str | None = None
    wall_clock: float = 0.0

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc", "mean_rate"])
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.lr), repr(e.train_loss), repr(e.train_acc),
                        "" if e.val_loss is None else repr(e.val_loss),
                        "" if e.val_acc is None else repr(e.val_acc), repr(e.mean_rate)])
        return buf.getvalue()


def _batches(n: int, size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield idx[start:start + size]


def _mean_rate(model: SpikingTransformer) -> float:
    rates = [m.firing_rate() for _, m in model.spiking_layers()]
    rates = [r for r in rates if r is not None]
    return float(np.mean(rates)) if rates else 0.0


def train(model: SpikingTransformer, data: Dataset, tc: TrainConfig, val: Dataset | None = None,
          log=None) -> TrainRun:
    """Train ``model`` in place. Batch order is drawn from ``tc.seed``; dataset arrays are never written."""
    if len(data) == 0:
        raise ConfigError("empty training set")
    expected = (model.cfg.in_channels,) + model.cfg.spatial_shape
    if data.images.shape[1:] != expected:
        raise ConfigError(f"data sample shape {data.images.shape[1:]} does not match model input {expected}")
    rng = np.random.default_rng(tc.seed)
    opt = AdamW(model.parameters(), tc.lr, tc.betas, tc.weight_decay, tc.eps)
    run = TrainRun()
    start = time.perf_counter()
    for epoch in range(tc.epochs):
        lr = cosine_lr(epoch, tc.epochs, tc.lr, tc.min_lr) if tc.sched == "cosine" else tc.lr
        opt.lr = lr
        model.train()
        for _, m in model.spiking_layers():
            m.start_probe()
        losses, correct = [], 0
        for b, idx in enumerate(_batches(len(data), tc.batch_size, rng.permutation(len(data)))):
            try:
                logits = model.classify(data.images[idx], data.ids[idx])
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {b}: {exc}") from None
            loss = F.cross_entropy(logits, data.labels[idx])
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at epoch {epoch} batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item() * len(idx))
            correct += int((logits.data.argmax(axis=1) == data.labels[idx]).sum())
        mean_rate = _mean_rate(model)
        for _, m in model.spiking_layers():
            m.stop_probe()
        val_loss = val_acc = None
        if val is not None:
            ev = evaluate(model, val, tc.val_batch_size)
            val_loss, val_acc = ev["loss"], ev["accuracy"]
        stats = EpochStats(epoch, lr, math.fsum(losses) / len(data), correct / len(data), val_loss, val_acc,
                           mean_rate)
        run.epochs.append(stats)
        if log is not None:
            log(stats)
    run.wall_clock = time.perf_counter() - start
    return run


def evaluate(model: SpikingTransformer, data: Dataset, batch_size: int = 128) -> dict:
    """Top-1 accuracy, mean loss and per-layer firing rates; leaves parameters and buffers untouched."""
    if len(data) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    model.start_probe()
    losses, correct = [], 0
    try:
        with no_grad():
            for idx in _batches(len(data), batch_size):
                logits = model.classify(data.images[idx], data.ids[idx])
                losses.append(F.cross_entropy(logits, data.labels[idx]).item() * len(idx))
                correct += int((logits.data.argmax(axis=1) == data.labels[idx]).sum())
        rates = model.firing_rates()
    finally:
        model.stop_probe()
        model.train(was_training)
    return {"accuracy": correct / len(data), "loss": math.fsum(losses) / len(data), "rates": rates}


def logits_of(model: SpikingTransformer, images: np.ndarray) -> Tensor:
    with no_grad():
        return model.classify(images)
