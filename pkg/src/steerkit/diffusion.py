"""Noise schedule, DDIM sampling and the MLP diffusion policy over action chunks.

Actions live in normalized units inside the policy (a delta of ``DELTA_MAX``
maps to 1.0); :meth:`DiffusionPolicy.sample` returns raw position deltas.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .blockworld import DELTA_MAX, N_COLORS, OBS_DIM, Dataset, Trajectory, clamp_norm
from .numerics import AdamState, MlpParams, Rng, Tape, Tensor, adam_step, backward, mlp_eval, mlp_forward
from .numerics.checkpoint import load_checkpoint, save_checkpoint
from .validation import check_fitted, check_obs

log = logging.getLogger(__name__)

TIME_EMBED_DIM = 16
REL_SCALE = 4.0
WAYPOINT_SCALE = 0.4
CHUNK_MODES = ("waypoints", "deltas")
FEATURE_DIM = OBS_DIM + 4 * N_COLORS

# (a_k, k, eps) -> eps_hat
EpsilonHook = Callable[[np.ndarray, int, np.ndarray], np.ndarray]


class SamplingError(FloatingPointError):
    pass


class NoiseSchedule:
    """Linear beta schedule over ``K`` training steps.

    ``alpha_bar(0)`` is 1 so that step 0 is the clean sample.
    """

    def __init__(self, K: int = 100, beta_start: float = 1e-4, beta_end: float = 0.08, ddim_steps: int = 10):
        if K < 1 or ddim_steps < 1 or ddim_steps > K:
            raise ValueError(f"need 1 <= ddim_steps <= K, got K={K}, ddim_steps={ddim_steps}")
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
        self.K = int(K)
        self.beta_start = float(beta_start)
        self.beta_end = float(beta_end)
        self.ddim_steps = int(ddim_steps)
        self.betas = np.linspace(beta_start, beta_end, K)
        self.alphas = 1.0 - self.betas
        # index k holds alpha_bar_k; index 0 is the clean endpoint
        self.alpha_bars = np.concatenate([[1.0], np.cumprod(self.alphas)])

    def alpha_bar(self, k) -> np.ndarray | float:
        return self.alpha_bars[k]

    @property
    def inference_steps(self) -> list[int]:
        """DDIM visiting order, e.g. [100, 90, ..., 10] for K=100, 10 steps."""
        return [int(round(self.K * (self.ddim_steps - i) / self.ddim_steps)) for i in range(self.ddim_steps)]

    @property
    def step_pairs(self) -> list[tuple[int, int]]:
        ks = self.inference_steps
        return list(zip(ks, ks[1:] + [0]))

    def config(self) -> dict:
        return {"K": self.K, "beta_range": [self.beta_start, self.beta_end], "ddim_steps": self.ddim_steps}

    def __repr__(self):
        return f"NoiseSchedule(K={self.K}, beta_start={self.beta_start}, beta_end={self.beta_end}, ddim_steps={self.ddim_steps})"


def forward_noise(a0: np.ndarray, k, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noise clean chunks to level ``k`` (scalar or one level per batch row)."""
    a0 = np.asarray(a0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if a0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != action shape {a0.shape}")
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k > sched.K):
        raise ValueError(f"noise step out of range 1..{sched.K}: {k}")
    ab = sched.alpha_bars[k].reshape(k.shape + (1,) * (a0.ndim - k.ndim))
    return np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * eps


def renoise(a: np.ndarray, k_from: int, k_to: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward-diffuse a sample from level ``k_from`` up to ``k_to`` > ``k_from``."""
    ratio = sched.alpha_bars[k_to] / sched.alpha_bars[k_from]
    return math.sqrt(ratio) * a + math.sqrt(1.0 - ratio) * eps


def ddim_step(a_k: np.ndarray, eps_hat: np.ndarray, k: int, k_next: int, sched: NoiseSchedule,
              clip: float | None = None) -> np.ndarray:
    """Deterministic (eta=0) DDIM update from level ``k`` to ``k_next``.

    ``clip`` bounds the intermediate clean-sample estimate to [-clip, clip].
    """
    if k_next >= k:
        raise ValueError(f"DDIM must move to a lower level, got {k} -> {k_next}")
    if not np.all(np.isfinite(eps_hat)):
        raise SamplingError(f"non-finite noise estimate at step {k}")
    ab, ab_next = sched.alpha_bars[k], sched.alpha_bars[k_next]
    a0_pred = (a_k - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    if clip is not None:
        a0_pred = np.clip(a0_pred, -clip, clip)
    return math.sqrt(ab_next) * a0_pred + math.sqrt(1.0 - ab_next) * eps_hat


def timestep_embedding(k, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding of noise levels; shape (..., dim)."""
    k = np.asarray(k, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / half)
    ang = k[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def policy_features(obs: np.ndarray) -> np.ndarray:
    """Observation plus scaled agent-to-square offsets, in slot order and in color order."""
    obs = np.asarray(obs, dtype=np.float64)
    b = len(obs)
    rel = obs[:, 2:2 + 2 * N_COLORS].reshape(b, N_COLORS, 2) - obs[:, None, :2]
    onehot = obs[:, 2 + 2 * N_COLORS:].reshape(b, N_COLORS, N_COLORS)  # [slot, color]
    by_color = np.einsum("bsc,bsd->bcd", onehot, rel)
    return np.concatenate([obs, REL_SCALE * rel.reshape(b, -1), REL_SCALE * by_color.reshape(b, -1)], axis=1)


def encode_chunks(deltas: np.ndarray, mode: str = "waypoints") -> np.ndarray:
    """Raw position deltas (..., L, 2) to the normalized denoising space."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if mode == "deltas":
        return deltas / DELTA_MAX
    return np.cumsum(deltas, axis=-2) / WAYPOINT_SCALE


def decode_chunks(a: np.ndarray, mode: str = "waypoints") -> np.ndarray:
    """Inverse of :func:`encode_chunks` on feasible chunks.

    Waypoints are decoded by tracking: each delta heads for the next waypoint
    from where the previous (norm-clamped) deltas actually got to, so a
    sampled path with over-long jumps is still followed instead of losing
    the clamped remainder.
    """
    a = np.asarray(a, dtype=np.float64)
    if mode == "deltas":
        return a * DELTA_MAX
    way = a * WAYPOINT_SCALE
    out = np.empty_like(way)
    pos = np.zeros_like(way[..., 0, :])
    for j in range(way.shape[-2]):
        d = clamp_norm(way[..., j, :] - pos)
        out[..., j, :] = d
        pos = pos + d
    return out


def chunk_windows(trajs: Sequence[Trajectory], chunk_len: int) -> dict[str, np.ndarray]:
    """Sliding windows over every trajectory, zero-padded past the last action.

    Returns observations, chunks in raw deltas, terminal observations and labels.
    """
    obs, chunks, goals, labels = [], [], [], []
    for tr in trajs:
        n = len(tr.actions)
        if n == 0:
            continue
        padded = np.concatenate([tr.actions, np.zeros((chunk_len, 2))])
        for t in range(n):
            obs.append(tr.observations[t])
            chunks.append(padded[t:t + chunk_len])
            goals.append(tr.terminal_observation)
            labels.append(-1 if tr.label is None else tr.label)
    if not obs:
        raise ValueError("dataset yields no action chunks (all trajectories empty)")
    return {
        "obs": np.array(obs),
        "chunks": np.array(chunks),
        "goals": np.array(goals),
        "labels": np.array(labels, dtype=np.int64),
    }


def _trajectories(X) -> list[Trajectory]:
    if isinstance(X, Dataset):
        return X.trajectories
    trajs = list(X)
    if not trajs:
        raise ValueError("empty dataset")
    if not all(isinstance(t, Trajectory) for t in trajs):
        raise TypeError("expected a Dataset or a sequence of Trajectory")
    return trajs


@dataclass
class SampleConfig:
    ddim_steps: int = 10
    eta: float = 0.0
    chunk_len: int = 16
    execute_len: int = 14

    def __post_init__(self):
        if self.execute_len > self.chunk_len:
            raise ValueError("execute_len must not exceed chunk_len")
        if self.eta != 0.0:
            raise ValueError("only deterministic DDIM (eta=0) is supported")


class DiffusionPolicy(BaseEstimator):
    """Observation-conditioned DDPM over action chunks, sampled with DDIM.

    With ``goal_conditioned=True`` the denoiser also reads a goal observation,
    zeroed with probability ``p_drop`` during training so the same network
    provides the unconditional branch for classifier-free guidance.

    Parameters
    ----------
    hidden : tuple of int
        Hidden widths of the denoiser MLP.
    schedule : NoiseSchedule, optional
        Shared noise schedule; a default one is built when omitted.
    chunk_len, execute_len : int
        Chunk length produced per query and how many steps the caller executes.
    goal_conditioned : bool
    p_drop : float
        Goal dropout probability (goal-conditioned policies only).
    epochs, batch_size, lr : training budget.
    random_state : int
    """

    def __init__(self, hidden=(256, 256, 256), schedule: NoiseSchedule | None = None, chunk_len: int = 16,
                 execute_len: int = 14, chunk_mode: str = "waypoints", goal_conditioned: bool = False, p_drop: float = 0.1,
                 epochs: int = 20, batch_size: int = 128, lr: float = 1e-3, random_state: int = 0,
                 verbose: int = 0):
        self.hidden = hidden
        self.schedule = schedule
        self.chunk_len = chunk_len
        self.execute_len = execute_len
        self.chunk_mode = chunk_mode
        self.goal_conditioned = goal_conditioned
        self.p_drop = p_drop
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state
        self.verbose = verbose

    @property
    def action_dim(self) -> int:
        return 2 * self.chunk_len

    @property
    def input_dim(self) -> int:
        return FEATURE_DIM + OBS_DIM + self.action_dim + TIME_EMBED_DIM

    def _inputs(self, a_k: np.ndarray, obs: np.ndarray, k, goal: np.ndarray | None) -> np.ndarray:
        b = a_k.shape[0]
        k = np.broadcast_to(np.asarray(k), (b,))
        if goal is None or not self.goal_conditioned:
            goal = np.zeros((b, OBS_DIM))
        return np.concatenate(
            [policy_features(obs), np.broadcast_to(goal, (b, OBS_DIM)), a_k.reshape(b, -1), timestep_embedding(k)], axis=1)

    def fit(self, X, y=None):
        if self.execute_len > self.chunk_len:
            raise ValueError("execute_len must not exceed chunk_len")
        trajs = _trajectories(X)
        data = chunk_windows(trajs, self.chunk_len)
        sched = self.schedule if self.schedule is not None else NoiseSchedule()
        rng = Rng(self.random_state)
        params = MlpParams.init([self.input_dim, *self.hidden, self.action_dim], rng)
        state = AdamState.zeros_like([t.data for t in params.tensors()])

        obs = data["obs"]
        a0 = encode_chunks(data["chunks"], self.chunk_mode).reshape(len(obs), -1)
        goals = data["goals"]
        n = len(obs)
        losses = []
        for epoch in range(self.epochs):
            perm = rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = perm[start:start + self.batch_size]
                b = len(idx)
                k = rng.integers(sched.K, size=(b,)) + 1
                eps = rng.gaussian((b, self.action_dim))
                a_k = forward_noise(a0[idx], k, eps, sched)
                if self.goal_conditioned:
                    keep = rng.uniform(size=(b,)) >= self.p_drop
                    goal = goals[idx] * keep[:, None]
                else:
                    goal = None
                x = self._inputs(a_k, obs[idx], k, goal)
                tape = Tape()
                pred = mlp_forward(params, Tensor(x), tape)
                diff = tape.sub(pred, eps)
                loss = tape.mean(tape.square(diff))
                grads = backward(tape, 1.0)
                flat = params.tensors()
                new, state = adam_step([t.data for t in flat], [grads[t] for t in flat], state, self.lr)
                params = params.with_arrays(new)
                total += float(loss.data) * b
            losses.append(total / n)
            if self.verbose:
                log.info("policy epoch %d loss %.5f", epoch + 1, losses[-1])
        self.params_ = params
        self.schedule_ = sched
        self.loss_curve_ = losses
        self.n_train_chunks_ = n
        return self

    # inference ------------------------------------------------------------

    def predict_epsilon(self, a_k: np.ndarray, obs: np.ndarray, k, goal: np.ndarray | None = None) -> np.ndarray:
        """Noise estimate for normalized chunks ``a_k`` of shape (B, L, 2)."""
        check_fitted(self, "params_")
        out = mlp_eval(self.params_, self._inputs(a_k, obs, k, goal))
        return out.reshape(a_k.shape)

    def initial_noise(self, rng: Rng, batch: int) -> np.ndarray:
        return rng.gaussian((batch, self.chunk_len, 2))

    def sample_normalized(self, obs, rng: Rng, goal=None, hook: EpsilonHook | None = None) -> np.ndarray:
        check_fitted(self, "params_")
        obs = check_obs(obs)
        sched = self.schedule_
        a = self.initial_noise(rng, obs.shape[0])
        for k, k_next in sched.step_pairs:
            eps = self.predict_epsilon(a, obs, k, goal)
            if hook is not None:
                eps_hat = hook(a, k, eps)
                if np.shape(eps_hat) != eps.shape:
                    raise SamplingError(f"hook returned shape {np.shape(eps_hat)}, expected {eps.shape}")
                eps = eps_hat
            a = ddim_step(a, eps, k, k_next, sched)
        return a

    def sample(self, obs, rng: Rng, goal=None, hook: EpsilonHook | None = None) -> np.ndarray:
        """Sample one chunk of raw position deltas per observation row."""
        return decode_chunks(self.sample_normalized(obs, rng, goal, hook), self.chunk_mode)

    def predict(self, obs, rng: Rng | None = None) -> np.ndarray:
        return self.sample(obs, rng if rng is not None else Rng(self.random_state))

    def score(self, X, y=None, rng: Rng | None = None) -> float:
        """Negative denoising MSE on ``X`` (higher is better)."""
        check_fitted(self, "params_")
        data = chunk_windows(_trajectories(X), self.chunk_len)
        rng = rng or Rng(self.random_state + 1)
        a0 = encode_chunks(data["chunks"], self.chunk_mode)
        n = len(a0)
        k = rng.integers(self.schedule_.K, size=(n,)) + 1
        eps = rng.gaussian(a0.shape)
        a_k = forward_noise(a0, k, eps, self.schedule_)
        goal = data["goals"] if self.goal_conditioned else None
        pred = self.predict_epsilon(a_k, data["obs"], k, goal)
        return -float(np.mean((pred - eps) ** 2))

    # persistence ----------------------------------------------------------

    def save(self, path):
        check_fitted(self, "params_")
        meta = {
            "role": "goal_policy" if self.goal_conditioned else "policy",
            "hidden": list(self.hidden),
            "chunk_len": self.chunk_len,
            "execute_len": self.execute_len,
            "chunk_mode": self.chunk_mode,
            "goal_conditioned": self.goal_conditioned,
            "p_drop": self.p_drop,
            "schedule": self.schedule_.config(),
            "loss_curve": self.loss_curve_,
        }
        return save_checkpoint(path, self.params_, meta)

    @classmethod
    def load(cls, path, schedule: NoiseSchedule | None = None) -> "DiffusionPolicy":
        layers, meta = load_checkpoint(path)
        if meta.get("role") not in ("policy", "goal_policy"):
            raise ValueError(f"{path}: checkpoint role {meta.get('role')!r} is not a policy")
        sc = meta["schedule"]
        sched = schedule or NoiseSchedule(sc["K"], *sc["beta_range"], sc["ddim_steps"])
        pol = cls(hidden=tuple(meta["hidden"]), schedule=sched, chunk_len=meta["chunk_len"],
                  execute_len=meta["execute_len"], chunk_mode=meta.get("chunk_mode", "waypoints"), goal_conditioned=meta["goal_conditioned"],
                  p_drop=meta["p_drop"])
        pol.params_ = MlpParams.from_arrays(layers)
        pol.schedule_ = sched
        pol.loss_curve_ = meta.get("loss_curve", [])
        return pol


def sample_chunk(policy: DiffusionPolicy, obs, rng: Rng, hook: EpsilonHook | None = None, goal=None) -> np.ndarray:
    """Functional alias of :meth:`DiffusionPolicy.sample`."""
    return policy.sample(obs, rng, goal=goal, hook=hook)
