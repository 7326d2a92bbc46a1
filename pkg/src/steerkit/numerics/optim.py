from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    """Raised when an update would consume a NaN or infinite gradient."""


@dataclass(frozen=True)
class AdamState:
    step: int
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls(0, tuple(np.zeros_like(a) for a in arrays), tuple(np.zeros_like(a) for a in arrays), **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float):
    """Bias-corrected Adam update. Returns ``(new_params, new_state)``.

    Inputs are not mutated. A non-finite gradient rejects the whole step.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("params, grads and optimizer state have different lengths")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient entry; Adam step rejected")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(t, tuple(new_m), tuple(new_v), b1, b2, state.eps)
