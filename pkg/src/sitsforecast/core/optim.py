"""AdamW, gradient clipping and the cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigurationError
from .params import ParamStore


def adamw_step(
    store: ParamStore,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One decoupled-weight-decay Adam update of the trainable partitions.

    Entries outside the trainable partitions are left bit-identical. All
    gradient buffers are zeroed afterwards.
    """
    if not lr > 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    if weight_decay < 0:
        raise ConfigurationError(f"weight decay must be non-negative, got {weight_decay}")
    b1, b2 = betas
    for name, e in store.items():
        if not store.is_trainable(name):
            continue
        e.step += 1
        g = e.grad
        e.m *= b1
        e.m += (1.0 - b1) * g
        e.v *= b2
        e.v += (1.0 - b2) * g * g
        m_hat = e.m / (1.0 - b1 ** e.step)
        v_hat = e.v / (1.0 - b2 ** e.step)
        if weight_decay:
            e.value *= 1.0 - lr * weight_decay
        e.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    store.zero_grad()


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Rescale trainable gradients to a global L2 norm of at most ``max_norm``.

    Returns the norm before clipping.
    """
    names = [n for n in store if store.is_trainable(n)]
    total = math.sqrt(sum(float(np.sum(store.entry(n).grad ** 2)) for n in names))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for n in names:
            store.entry(n).grad *= factor
    return total


def cosine_lr(step: int, total_steps: int, lr_initial: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from ``lr_initial`` at step 0 to ``lr_min`` at ``total_steps``.

    Steps past ``total_steps`` are clamped to ``lr_min``.
    """
    if total_steps < 1:
        raise ConfigurationError("total_steps must be >= 1")
    if step < 0:
        raise ConfigurationError("step must be >= 0")
    if step >= total_steps:
        return float(lr_min)
    return lr_min + 0.5 * (lr_initial - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))
