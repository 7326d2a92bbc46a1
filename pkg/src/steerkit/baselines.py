"""Comparison methods: sample-and-rank, goal conditioning and classifier-free guidance."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .blockworld import OBS_DIM
from .diffusion import DiffusionPolicy, ddim_step, decode_chunks
from .guidance import Objective, score
from .numerics import Rng
from .validation import check_fitted, check_obs

log = logging.getLogger(__name__)

METHODS = ("base", "dynaguide", "gpc", "goal", "cfg", "itps")


@dataclass(frozen=True)
class RankConfig:
    n_samples: int = 5

    def __post_init__(self):
        if int(self.n_samples) != self.n_samples or self.n_samples < 1:
            raise ValueError(f"n_samples must be a positive integer, got {self.n_samples}")


def sample_and_rank(policy: DiffusionPolicy, objective: Objective, obs, rng: Rng,
                    cfg: RankConfig = RankConfig(), return_scores: bool = False):
    """Draw ``n_samples`` unguided chunks per observation and keep the best scored one.

    Candidates are scored on their clean (fully denoised) form. Ties go to
    the lowest sample index; rows whose scores are all non-finite fall back
    to the first sample.
    """
    obs = check_obs(obs)
    b, n = obs.shape[0], cfg.n_samples
    # row i * n + j is sample j of observation i
    cand = policy.sample_normalized(np.repeat(obs, n, axis=0), rng)
    scores = score(objective, np.repeat(obs, n, axis=0), cand).reshape(b, n)
    finite = np.isfinite(scores)
    if not finite.all(axis=1).all():
        dead = ~finite.any(axis=1)
        if dead.any():
            log.warning("all candidate scores non-finite for %d row(s); using the first sample", int(dead.sum()))
        scores = np.where(finite, scores, -np.inf)
    best = np.argmax(scores, axis=1)
    best = np.where(np.isfinite(scores[np.arange(b), best]), best, 0)
    chosen = cand.reshape(b, n, *cand.shape[1:])[np.arange(b), best]
    chunk = decode_chunks(chosen, policy.chunk_mode)
    if return_scores:
        return chunk, scores, best
    return chunk


def _require_goal_policy(policy: DiffusionPolicy):
    check_fitted(policy, "params_")
    if not policy.goal_conditioned:
        raise ValueError("goal-conditioned rollout needs a policy trained with goal_conditioned=True")


def _goals(goals, batch: int) -> np.ndarray:
    """Goals as (B, m, 26): one or several per observation row."""
    g = np.asarray(goals, dtype=np.float64)
    if g.ndim == 1:
        g = np.broadcast_to(g, (batch, 1, OBS_DIM))
    elif g.ndim == 2:
        g = g[:, None, :] if g.shape[0] == batch else np.broadcast_to(g, (batch,) + g.shape)
    if g.shape[0] != batch or g.shape[-1] != OBS_DIM or g.ndim != 3:
        raise ValueError(f"goals must be (26,), (B, 26) or (B, m, 26) for B={batch}, got {np.shape(goals)}")
    return g


def goal_rollout(goal_policy: DiffusionPolicy, obs, goal, rng: Rng) -> np.ndarray:
    """Chunk from the goal-conditioned policy with the goal block filled in."""
    _require_goal_policy(goal_policy)
    obs = check_obs(obs)
    g = _goals(goal, obs.shape[0])
    if g.shape[1] != 1:
        raise ValueError("goal_rollout takes one goal per observation")
    return goal_policy.sample(obs, rng, goal=g[:, 0])


def cfg_epsilon(eps_cond, eps_uncond, w: float) -> np.ndarray:
    """(1 + w) * eps_cond - w * eps_uncond; a list of conditional estimates is averaged first."""
    if w < 0:
        raise ValueError(f"guidance weight must be >= 0, got {w}")
    if isinstance(eps_cond, (list, tuple)):
        eps_cond = eps_cond[0] if len(eps_cond) == 1 else np.mean(np.stack(eps_cond), axis=0)
    return (1.0 + w) * eps_cond - w * eps_uncond


def cfg_sample(goal_policy: DiffusionPolicy, obs, goals, w: float, rng: Rng) -> np.ndarray:
    """Classifier-free guidance towards one or several goals per row (equal weights)."""
    _require_goal_policy(goal_policy)
    obs = check_obs(obs)
    g = _goals(goals, obs.shape[0])
    sched = goal_policy.schedule_
    a = goal_policy.initial_noise(rng, obs.shape[0])
    for k, k_next in sched.step_pairs:
        conds = [goal_policy.predict_epsilon(a, obs, k, g[:, j]) for j in range(g.shape[1])]
        if w == 0.0:
            eps = cfg_epsilon(conds, 0.0, 0.0) if len(conds) > 1 else conds[0]
        else:
            eps = cfg_epsilon(conds, goal_policy.predict_epsilon(a, obs, k, None), w)
        a = ddim_step(a, eps, k, k_next, sched)
    return decode_chunks(a, goal_policy.chunk_mode)
