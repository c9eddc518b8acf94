from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


def adam_step(state: AdamState, params, grads=None, lr=None):
    """One bias-corrected Adam update applied in place to ``params``.

    ``params`` are :class:`Param` objects (gradients read from ``.grad``) or
    plain arrays with ``grads`` given alongside.
    """
    values = [getattr(p, "value", p) for p in params]
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(values):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(v) for v in values]
        state.v = [np.zeros_like(v) for v in values]
    for v, g, m in zip(values, grads, state.m):
        if v.shape != g.shape or v.shape != m.shape:
            raise ValueError(f"shape mismatch: param {v.shape}, grad {g.shape}, moment {m.shape}")
    state.step += 1
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for v, g, m, s in zip(values, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        s *= b2
        s += (1 - b2) * (g * g)
        v -= (lr * (m / c1) / (np.sqrt(s / c2) + state.epsilon)).astype(v.dtype)
    return state


def exponential_decay(iteration, base=1e-4, factor=0.8, every=20000):
    """Staircase schedule ``base * factor ** floor(iteration / every)``."""
    return base * factor ** (iteration // every)
