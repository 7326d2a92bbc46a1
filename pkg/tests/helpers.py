"""Small helpers shared by the test modules."""
from __future__ import annotations

import numpy as np

from steerkit.blockworld import observe, reset
from steerkit.numerics import Rng

CRITERIA: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> bool:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA[n] = line
    print(line)
    return ok


def random_obs(rng: Rng, n: int) -> np.ndarray:
    return np.stack([observe(reset(rng.split(i + 1))) for i in range(n)])


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, entry by entry."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-4) -> float:
    """Norm-wise relative error; ``floor`` keeps near-zero gradients from
    turning finite-difference roundoff into a huge ratio."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)
