"""Finite-difference verification of the whole family at toy scale.

Every hand-derived backward pass in this package funnels through
``loss_and_grads``, so checking the full loss gradient of each variant
against central differences exercises all of them at once, including the
gradient flow from generated gamma/beta back through summarization into
lower layers. Parameters are jittered after the deterministic init so the
zero-initialized generator heads do not mask real gradient paths.
"""

from __future__ import annotations

import numpy as np

from .conditioning import UNKNOWN_DIALECT, DialectVocabulary
from .data import Batch
from .model import VARIANTS, build_model, loss_and_grads, variant_config
from .numerics import Rng, grad_check

__all__ = ["GRAD_TOLERANCE", "toy_batch", "toy_model", "variant_grad_check"]

GRAD_TOLERANCE = 1e-4

TOY_LAYERS = 2
TOY_HIDDEN = 4
TOY_FEATURES = 3
TOY_CLASSES = 3
TOY_DIALECTS = ("alpha", "bravo", "charlie")


def toy_vocabulary(include_unknown=False):
    return DialectVocabulary.of(TOY_DIALECTS, include_unknown=include_unknown)


def toy_batch(seed=0, include_unknown=False, lengths=(5, 4)):
    """A two-utterance padded batch (T <= 5) with random frames and labels."""
    rng = Rng(seed)
    t_max = max(lengths)
    frames = np.zeros((len(lengths), t_max, TOY_FEATURES))
    mask = np.zeros((len(lengths), t_max))
    labels = np.full((len(lengths), t_max), -1, dtype=np.int64)
    names = list(TOY_DIALECTS) + ([UNKNOWN_DIALECT] if include_unknown else [])
    dialects = []
    for row, t in enumerate(lengths):
        frames[row, :t] = rng.normal(0.0, 1.0, (t, TOY_FEATURES))
        mask[row, :t] = 1.0
        labels[row, :t] = rng.integers(0, TOY_CLASSES, t)
        dialects.append(names[int(rng.integers(0, len(names)))])
    return Batch(frames=frames, mask=mask, labels=labels, dialects=dialects,
                 indices=list(range(len(lengths))))


def toy_model(variant, seed=0, jitter=0.1):
    """Build a toy-scale variant and jitter every parameter.

    The jitter matters: with the pristine near-identity init the generator
    head weights are exactly zero, which would zero out the gradients of
    everything behind them and let a broken chain rule pass unnoticed.
    """
    vocab = toy_vocabulary(include_unknown=(variant == "M10"))
    cfg = variant_config(variant, vocab, input_dim=TOY_FEATURES, num_classes=TOY_CLASSES,
                         hidden=TOY_HIDDEN, num_layers=TOY_LAYERS,
                         lookahead_tau=1, repr_units=6, combiner_units=5)
    model = build_model(cfg, seed=seed)
    rng = Rng(seed).derive(1)
    for name in model.params.names():
        value = model.params.value(name)
        value += rng.uniform(-jitter, jitter, value.shape)
    return model


def variant_grad_check(variant, seed=0, eps=1e-5):
    """Max relative gradient error of one variant's full toy loss."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    model = toy_model(variant, seed=seed)
    batch = toy_batch(seed=seed, include_unknown=(variant == "M10"))
    return grad_check(lambda params: loss_and_grads(model, batch)[0], model.params, eps=eps)
