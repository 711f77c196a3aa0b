"""AdamW with warmup + cosine decay, the training loop, and top-1 evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import Dataset
from .model import HiT

log = logging.getLogger(__name__)

NO_DECAY = ("cls_token", "pos_embed")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the model holds the last good parameters."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 64
    epochs: int = 30
    warmup_epochs: int = 3
    schedule: str = "cosine"
    label_smoothing: float = 0.1
    seed: int = 0
    eval_every: int = 1
    hflip: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.warmup_epochs > self.epochs or self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.schedule != "cosine":
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr``, then cosine decay to ``base_lr / 100``."""
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    min_lr = base_lr / 100.0
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay (decay applied as ``p *= 1 - lr * wd``)."""

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decay_filter=None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_filter = decay_filter or (lambda name, p: True)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay and self.decay_filter(name, p):
                p.data *= p.data.dtype.type(1.0 - lr * self.weight_decay)
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype, copy=False)


def decays(name: str, p) -> bool:
    return p.data.ndim >= 2 and name not in NO_DECAY


def evaluate_top1(model, data: Dataset, batch_size: int = 256) -> float:
    """Fraction of samples whose argmax logit equals the label."""
    if len(data) == 0:
        return float("nan")
    logits = model.predict_logits(data.images, batch_size=batch_size)
    return float((logits.argmax(axis=-1) == data.labels).mean())


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    eval_acc: float


@dataclass
class TrainResult:
    model: HiT
    history: list[EpochRecord] = field(default_factory=list)
    epochs_done: int = 0
    step_losses: list[float] = field(default_factory=list)


def train(
    model: HiT,
    cfg: TrainConfig,
    train_data: Dataset,
    eval_data: Dataset | None = None,
    on_epoch=None,
) -> TrainResult:
    """Train ``model`` in place. Deterministic for a given seed and data order.

    ``on_epoch(result)`` runs after every epoch (e.g. to write a checkpoint).
    On a non-finite loss the parameters are rolled back to the end of the
    last finished epoch and :class:`TrainingDiverged` is raised.
    """
    rng = np.random.default_rng(cfg.seed)
    n = len(train_data)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    warmup = steps_per_epoch * cfg.warmup_epochs
    opt = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay, decay_filter=decays)
    result = TrainResult(model)
    good = {k: p.data.copy() for k, p in model.params.items()}
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = train_data.images[idx]
            if cfg.hflip:
                flip = rng.random(len(idx)) < 0.5
                x = np.where(flip[:, None, None, None], x[:, :, ::-1], x)
            model.zero_grad()
            logits = model.forward(x, training=True, rng=rng)
            loss = T.cross_entropy_smoothed(logits, train_data.labels[idx], cfg.label_smoothing)
            value = loss.item()
            if not np.isfinite(value):
                for k, p in model.params.items():
                    p.data[...] = good[k]
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, step {step}")
            T.backward(loss)
            opt.step(lr_at(step, total, warmup, cfg.lr))
            step += 1
            losses.append(value)
            result.step_losses.append(value)
        acc = float("nan")
        if eval_data is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            acc = evaluate_top1(model, eval_data)
        rec = EpochRecord(epoch + 1, float(np.mean(losses)) if losses else float("nan"), acc)
        result.history.append(rec)
        result.epochs_done = epoch + 1
        log.info("epoch %d train_loss %.4f eval_acc %.4f", rec.epoch, rec.train_loss, rec.eval_acc)
        good = {k: p.data.copy() for k, p in model.params.items()}
        if on_epoch is not None:
            on_epoch(result)
    model.zero_grad()
    return result
