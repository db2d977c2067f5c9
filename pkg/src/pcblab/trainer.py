"""Deterministic mini-batch SGD with online confusion-matrix tracking."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .confmat import ConfusionMatrix, ema_update
from .datagen import LongTailDataset
from .head import BACKBONE_PARAMS, RecurrentHead, fg_probs, forward, loss_and_grads
from .losses import LossConfig

log = logging.getLogger(__name__)

RANDOM, REPEAT_FACTOR = "random", "repeat_factor"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_epochs: int = 0
    warmup_per_iter: bool = False
    decay_epochs: tuple[int, ...] = (40, 50)
    decay_factor: float = 0.1
    sampler: str = RANDOM
    rf_threshold: float = 0.001
    pcb_start_epoch: int = 40
    decoupled: bool = False
    gamma: float = 0.99
    alpha: float | None = None
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError(f"decay_epochs must be strictly increasing, got {self.decay_epochs}")
        if self.decay_epochs and self.decay_epochs[-1] >= self.epochs:
            raise ValueError(f"decay epochs must be < epochs ({self.epochs}), got {self.decay_epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.sampler not in (RANDOM, REPEAT_FACTOR):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.warmup_epochs < 0 or self.pcb_start_epoch < 0:
            raise ValueError("warmup_epochs and pcb_start_epoch must be >= 0")


def lr_at(epoch: int, config: TrainConfig, progress: float = 1.0) -> float:
    """Learning rate for 0-based ``epoch``.

    Warm-up ramps linearly to ``lr`` over ``warmup_epochs``; per epoch by
    default (epoch 0 gets ``lr / warmup_epochs``), or per iteration when
    ``warmup_per_iter`` is set, with ``progress`` the fraction of the epoch done.
    A step decay by ``decay_factor`` applies from each decay epoch onward.
    """
    base = config.lr
    if epoch < config.warmup_epochs:
        frac = (epoch + progress) if config.warmup_per_iter else (epoch + 1)
        base = config.lr * frac / config.warmup_epochs
    drops = sum(1 for d in config.decay_epochs if epoch >= d)
    return base * config.decay_factor ** drops


def repeat_factors(class_counts, t: float) -> np.ndarray:
    """Per-class ``max(1, sqrt(t / f_c))`` with ``f_c`` the class's share of train samples."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if not 0.0 < t <= 1.0:
        raise ValueError(f"repeat-factor threshold must lie in (0, 1], got {t}")
    if np.any(counts <= 0):
        raise ValueError("every class needs at least one train sample for repeat-factor sampling")
    freq = counts / counts.sum()
    return np.maximum(1.0, np.sqrt(t / freq))


def epoch_order(labels, config: TrainConfig, rng: np.random.Generator, class_counts=None) -> np.ndarray:
    """Sample indices for one epoch.

    The repeat-factor sampler replicates each sample ``floor(r) + Bernoulli(frac(r))``
    times (stochastic rounding) before shuffling.
    """
    n = labels.size
    if config.sampler == RANDOM:
        return rng.permutation(n)
    if class_counts is None:
        class_counts = np.bincount(labels)
    r = repeat_factors(class_counts, config.rf_threshold)[labels]
    whole = np.floor(r)
    reps = (whole + (rng.random(n) < (r - whole))).astype(np.int64)
    return rng.permutation(np.repeat(np.arange(n), reps))


def sgd_step(params: dict, grads: dict, lr: float, momentum: float, weight_decay: float,
             velocity: dict, frozen=()) -> dict:
    """Heavy-ball SGD, in place: ``v = mu v + g + wd p``; ``p -= lr v``."""
    for k, p in params.items():
        if k in frozen:
            continue
        g = grads[k]
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {k}")
        v = velocity.get(k)
        step = g + weight_decay * p if weight_decay else g
        v = step if v is None else momentum * v + step
        velocity[k] = v
        p -= lr * v
    return params


@dataclass
class TrainResult:
    head: RecurrentHead
    cm: ConfusionMatrix
    log: list = field(default_factory=list)


def run_training(dataset: LongTailDataset, head: RecurrentHead, loss_config: LossConfig,
                 config: TrainConfig, evaluate=None) -> TrainResult:
    """Train ``head`` (a copy is updated) and return it with the final EMA matrix.

    Before ``pcb_start_epoch`` the PCB weight is forced to zero. In decoupled
    mode those epochs form phase one and the backbone is frozen afterwards.
    ``evaluate(head, epoch)`` may return a dict of metrics that is merged into
    the per-epoch log.
    """
    head = head.copy()
    x, y = dataset.train()
    x = x.astype(next(iter(head.params.values())).dtype)
    c = head.config.num_classes
    if dataset.num_classes != c:
        raise ValueError(f"dataset has {dataset.num_classes} classes, head has {c}")
    alpha = loss_config.alpha if config.alpha is None else config.alpha
    cm = ConfusionMatrix.identity(c, momentum=config.gamma)
    rng = np.random.default_rng(config.seed)
    velocity: dict = {}
    history = []

    for epoch in range(config.epochs):
        pcb_on = epoch >= config.pcb_start_epoch
        frozen = BACKBONE_PARAMS if (config.decoupled and pcb_on) else ()
        order = epoch_order(y, config, rng, dataset.class_counts)
        n_iter = math.ceil(order.size / config.batch_size)
        epoch_loss = 0.0
        for it in range(n_iter):
            idx = order[it * config.batch_size:(it + 1) * config.batch_size]
            lr = lr_at(epoch, config, (it + 1) / n_iter)
            trace = forward(x[idx], head)
            total, grads, _ = loss_and_grads(trace, y[idx], cm, loss_config, head,
                                             alpha=alpha if pcb_on else 0.0)
            if not math.isfinite(total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, iteration {it}")
            try:
                sgd_step(head.params, grads, lr, config.momentum, config.weight_decay, velocity, frozen)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}, iteration {it}") from None
            # statistics are updated after the step so a batch never sees its own predictions
            ema_update(cm, fg_probs(trace.logits[-1], head.config), y[idx])
            epoch_loss += total * idx.size
        row = {"epoch": epoch, "lr": lr_at(epoch, config), "loss": epoch_loss / order.size}
        if evaluate is not None and ((epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1):
            row.update(evaluate(head, epoch))
        history.append(row)
        log.debug("epoch %d loss %.6f", epoch, row["loss"])
    return TrainResult(head=head, cm=cm, log=history)
