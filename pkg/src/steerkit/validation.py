"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError

from .blockworld import OBS_DIM


def check_fitted(est, attr: str):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit() first")


def check_obs(obs) -> np.ndarray:
    """Return observations as a finite (B, OBS_DIM) float array."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 1:
        obs = obs[None]
    if obs.ndim != 2 or obs.shape[1] != OBS_DIM:
        raise ValueError(f"observations must have shape (B, {OBS_DIM}), got {obs.shape}")
    if not np.all(np.isfinite(obs)):
        raise ValueError("observations contain non-finite values")
    return obs


def check_chunks(chunks, chunk_len: int, batch: int | None = None) -> np.ndarray:
    """Return chunks as a finite (B, chunk_len, 2) float array."""
    chunks = np.asarray(chunks, dtype=np.float64)
    if chunks.ndim == 2:
        chunks = chunks[None]
    if chunks.ndim != 3 or chunks.shape[1:] != (chunk_len, 2):
        raise ValueError(f"action chunks must have shape (B, {chunk_len}, 2), got {chunks.shape}")
    if batch is not None and chunks.shape[0] != batch:
        raise ValueError(f"expected {batch} chunks, got {chunks.shape[0]}")
    if not np.all(np.isfinite(chunks)):
        raise ValueError("action chunks contain non-finite values")
    return chunks
