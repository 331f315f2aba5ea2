"""Adam with bias correction and the step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BASE_LR = 1e-4
DECAY = 0.5
DECAY_EVERY = 10


class NonFiniteGradient(FloatingPointError):
    pass


def lr_schedule(epoch: int, base_lr: float = BASE_LR, decay: float = DECAY, every: int = DECAY_EVERY) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base_lr * decay ** (epoch // every)


@dataclass
class AdamState:
    lr: float = BASE_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(state: AdamState, params: dict, grads: dict, lr: float | None = None) -> dict:
    """One in-place Adam step over every parameter that has a gradient."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    lr = state.lr if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= step.astype(p.dtype, copy=False)
    return params
