"""AdamW with a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * 0.5 * (1 + cos(pi * step / total)); zero at and beyond the end."""
    if total_steps <= 0 or step >= total_steps:
        return 0.0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    count: int = 0

    @classmethod
    def zeros_like(cls, tensors):
        return cls(
            {k: np.zeros_like(a) for k, a in tensors.items()},
            {k: np.zeros_like(a) for k, a in tensors.items()},
        )


def adamw_update(tensors, grads, state: AdamWState, lr: float, beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=1e-2):
    """One decoupled-weight-decay Adam step.

    Returns a new tensor dict; the inputs are left untouched so readers of
    the previous parameters never observe a half-applied update.
    """
    if state.m.keys() != tensors.keys():
        raise ValueError("optimizer state does not match parameters")
    state.count += 1
    c1 = 1.0 - beta1 ** state.count
    c2 = 1.0 - beta2 ** state.count
    new = {}
    for name, theta in tensors.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        step = (m / c1) / (np.sqrt(v / c2) + eps)
        new[name] = theta - lr * (step + weight_decay * theta)
    return new


def optimizer_step(tensors, grads, state: AdamWState, step_index: int, total_steps: int,
                   lr0: float, weight_decay: float = 1e-2):
    lr = cosine_lr(step_index, total_steps, lr0)
    return adamw_update(tensors, grads, state, lr, weight_decay=weight_decay), lr
