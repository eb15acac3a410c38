"""Adam training with plateau-halved learning rate, unknown-dialect
relabeling, and per-dialect fine-tuning.

The loop is deterministic under a fixed seed: minibatch shuffles, unknown
relabeling draws, and initialization all come from seeded Philox streams, so
two runs with identical inputs produce identical logs and identical model
bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .conditioning import UNKNOWN_DIALECT
from .data import batch_iterator
from .model import forward, loss_and_grads
from .numerics import Rng

__all__ = [
    "Adam",
    "TrainConfig",
    "TrainingDiverged",
    "dev_frame_error",
    "fine_tune",
    "relabel_unknown",
    "train",
]


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 12
    seed: int = 0
    # None means "use the model config's unknown_prob".
    unknown_prob: float | None = None
    lr_floor_div: float = 64.0

    def validate(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.unknown_prob is not None and not 0.0 <= self.unknown_prob <= 1.0:
            raise ValueError("unknown_prob must lie in [0, 1]")
        if self.lr <= 0 or self.lr_floor_div < 1:
            raise ValueError("bad learning rate settings")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")


class Adam:
    """Standard Adam with bias correction; state keyed by parameter name.

    Updates are applied in place so any views into the store stay valid.
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, store, lr):
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name in store.names():
            g = store.grad(name)
            if not np.isfinite(g).all():
                raise TrainingDiverged(f"non-finite gradient in {name!r} at step {self.t}")
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            store.value(name)[...] -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def relabel_unknown(labels, p, rng):
    """Independently replace each label with the unknown dialect with
    probability ``p``; the input list is never mutated."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("relabel probability must lie in [0, 1]")
    if p == 0.0:
        return list(labels)
    draws = rng.random(len(labels))
    return [UNKNOWN_DIALECT if d < p else lab for d, lab in zip(draws, labels)]


def dev_frame_error(model, dataset, batch_size=64):
    """Fraction of unpadded frames misclassified, inference mode, true labels."""
    errors = 0
    total = 0
    for batch in batch_iterator(dataset, batch_size):
        result = forward(model, batch, mode="infer")
        pred = result.logits.argmax(axis=-1)
        wrong = (pred != batch.labels) & (batch.mask > 0)
        errors += int(wrong.sum())
        total += batch.num_frames()
    if total == 0:
        raise ValueError("empty evaluation dataset")
    return errors / total


def train(model, train_set, dev_set, config):
    """Train in place; returns (model, per-epoch log).

    Each epoch runs seeded shuffled minibatches, applies unknown-dialect
    relabeling when enabled (resampled every epoch; the dataset keeps its
    original labels), then measures dev frame error in inference mode. When
    the dev error fails to improve on the best seen so far for two epochs in
    a row (plateau patience of one), the learning rate halves, down to a
    floor of lr / lr_floor_div.
    """
    config.validate()
    if len(train_set) == 0 or len(dev_set) == 0:
        raise ValueError("empty dataset")
    if train_set.feature_dim != model.config.input_dim:
        raise ValueError(f"dataset feature_dim {train_set.feature_dim} != model input_dim "
                         f"{model.config.input_dim}")
    if train_set.num_classes != model.config.num_classes:
        raise ValueError(f"dataset num_classes {train_set.num_classes} != model "
                         f"{model.config.num_classes}")
    p = model.config.unknown_prob if config.unknown_prob is None else config.unknown_prob
    if p > 0 and not model.config.vocabulary.has_unknown:
        raise ValueError("unknown-dialect relabeling needs the unknown vocabulary entry")

    rng = Rng(config.seed)
    adam = Adam(beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    lr = config.lr
    floor = config.lr / config.lr_floor_div
    best = np.inf
    bad_epochs = 0
    base_labels = [u.dialect for u in train_set]
    log = []
    for epoch in range(1, config.max_epochs + 1):
        labels = relabel_unknown(base_labels, p, rng) if p > 0 else None
        shuffle_seed = int(rng.integers(0, 2 ** 62))
        loss_sum = 0.0
        frames = 0
        for batch in batch_iterator(train_set, config.batch_size, seed=shuffle_seed,
                                    shuffle=True, dialect_overrides=labels):
            loss, _ = loss_and_grads(model, batch)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            adam.step(model.params, lr)
            loss_sum += loss * batch.num_frames()
            frames += batch.num_frames()
        dev_fer = dev_frame_error(model, dev_set, batch_size=config.batch_size)
        log.append({"epoch": epoch, "lr": lr, "train_loss": loss_sum / frames,
                    "dev_fer": dev_fer})
        if dev_fer < best:
            best = dev_fer
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > 1:
                lr = max(lr * 0.5, floor)
                bad_epochs = 0
    return model, log


def fine_tune(model, train_subset, dev_subset, config, lr_scale=0.1):
    """Clone the model and continue training on one dialect's data.

    All parameters stay unfrozen; the learning rate defaults to a tenth of
    the base configuration's. The input model is untouched.
    """
    if len(train_subset) == 0:
        raise ValueError("empty fine-tuning dataset")
    clone = model.clone()
    if config.max_epochs == 0:
        return clone, []
    scaled = replace(config, lr=config.lr * lr_scale)
    return train(clone, train_subset, dev_subset, scaled)
