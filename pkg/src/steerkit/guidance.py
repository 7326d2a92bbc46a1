"""Guidance metric, its gradient through the dynamics model, and the guided sampler.

Objectives map a batch of (observation, normalized chunk) pairs to one score
per row, higher meaning closer to the desired outcome. The guided sampler
pushes each denoising step up the score gradient.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .blockworld import DELTA_MAX, N_COLORS, OBS_DIM, color_index, read_dataset
from .diffusion import WAYPOINT_SCALE, DiffusionPolicy, ddim_step, decode_chunks, renoise
from .dynamics import DynamicsModel
from .numerics import Rng, Tape, Tensor, backward
from .validation import check_obs

log = logging.getLogger(__name__)

DISTANCE_MODES = ("euclidean", "squared")
METRIC_MODES = ("latent", "classifier")
GSET_FORMAT = "steerkit-gset-v1"


class GuidanceError(ValueError):
    pass


# guidance sets ---------------------------------------------------------------

def _as_conditions(x, name: str) -> np.ndarray:
    a = np.asarray(x if x is not None else np.zeros((0, OBS_DIM)), dtype=np.float64)
    if a.ndim == 1 and a.size:
        a = a[None]
    if a.size == 0:
        return np.zeros((0, OBS_DIM))
    if a.ndim not in (2, 3) or a.shape[-1] != OBS_DIM:
        raise GuidanceError(f"{name} must have shape (n, {OBS_DIM}) or (B, n, {OBS_DIM}), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise GuidanceError(f"{name} contain non-finite values")
    return a


@dataclass(frozen=True)
class GuidanceSet:
    """Desired (positive) and undesired (negative) outcomes.

    Latent mode holds encoded conditions, either shared by every episode with
    shape (n, 26) or one set per batch row with shape (B, n, 26). Classifier
    mode holds target and avoided colors instead.
    """

    positives: np.ndarray = field(default_factory=lambda: np.zeros((0, OBS_DIM)))
    negatives: np.ndarray = field(default_factory=lambda: np.zeros((0, OBS_DIM)))
    target_colors: tuple[int, ...] = ()
    avoid_colors: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "positives", _as_conditions(self.positives, "positives"))
        object.__setattr__(self, "negatives", _as_conditions(self.negatives, "negatives"))
        object.__setattr__(self, "target_colors", tuple(color_index(c) for c in self.target_colors))
        object.__setattr__(self, "avoid_colors", tuple(color_index(c) for c in self.avoid_colors))
        if set(self.target_colors) & set(self.avoid_colors):
            raise GuidanceError("a color cannot be both targeted and avoided")

    @property
    def n_positive(self) -> int:
        return self.positives.shape[-2] if self.positives.size else 0

    @property
    def n_negative(self) -> int:
        return self.negatives.shape[-2] if self.negatives.size else 0

    def check(self, mode: str) -> "GuidanceSet":
        if mode == "latent" and self.n_positive == 0 and self.n_negative == 0:
            raise GuidanceError("latent guidance needs at least one positive or negative condition")
        if mode == "classifier" and not (self.target_colors or self.avoid_colors):
            raise GuidanceError("classifier guidance needs a target (or avoided) color")
        if mode not in METRIC_MODES:
            raise GuidanceError(f"unknown metric mode {mode!r}")
        return self

    def swapped(self) -> "GuidanceSet":
        return GuidanceSet(self.negatives, self.positives, self.avoid_colors, self.target_colors)

    @classmethod
    def classifier(cls, target=None, avoid=None) -> "GuidanceSet":
        def colors(c):
            if c is None:
                return ()
            return (c,) if isinstance(c, (int, str, np.integer)) else tuple(c)
        return cls(target_colors=colors(target), avoid_colors=colors(avoid))

    # persistence

    def to_json(self) -> dict:
        doc = {"format": GSET_FORMAT}
        if self.target_colors or self.avoid_colors:
            if len(self.target_colors) == 1:
                doc["target_color"] = self.target_colors[0]
            elif self.target_colors:
                doc["target_colors"] = list(self.target_colors)
            if len(self.avoid_colors) == 1:
                doc["avoid_color"] = self.avoid_colors[0]
            elif self.avoid_colors:
                doc["avoid_colors"] = list(self.avoid_colors)
        if self.positives.ndim == 3 or self.negatives.ndim == 3:
            raise GuidanceError("per-episode guidance sets are not serializable")
        conds = [{"polarity": "+", "obs": [float(v) for v in z]} for z in self.positives]
        conds += [{"polarity": "-", "obs": [float(v) for v in z]} for z in self.negatives]
        if conds:
            doc["conditions"] = conds
        return doc

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1))
        return path

    @classmethod
    def from_json(cls, doc: dict, base_dir=None) -> "GuidanceSet":
        """Parse a guidance-set document.

        Each condition carries a polarity ("+" or "-") and either an inline
        terminal observation ``obs`` or a dataset reference ``ref`` of the form
        ``"path/demos.jsonl:line"`` (1-based line, path relative to ``base_dir``).
        """
        base = Path(base_dir) if base_dir is not None else Path(".")
        pos, neg = [], []
        cache: dict[Path, list] = {}
        for cond in doc.get("conditions", []):
            pol = cond.get("polarity")
            if pol not in ("+", "-", "positive", "negative"):
                raise GuidanceError(f"condition polarity must be '+' or '-', got {pol!r}")
            if "obs" in cond:
                z = np.asarray(cond["obs"], dtype=np.float64)
            elif "ref" in cond:
                z = _resolve_ref(cond["ref"], base, cache)
            else:
                raise GuidanceError("condition needs 'obs' or 'ref'")
            if z.shape != (OBS_DIM,):
                raise GuidanceError(f"condition observation must have {OBS_DIM} entries, got {z.shape}")
            (pos if pol in ("+", "positive") else neg).append(z)

        def colors(key_one, key_many):
            if key_one in doc:
                return (doc[key_one],)
            return tuple(doc.get(key_many, ()))

        return cls(np.array(pos) if pos else None, np.array(neg) if neg else None,
                   colors("target_color", "target_colors"), colors("avoid_color", "avoid_colors"))

    @classmethod
    def load(cls, path) -> "GuidanceSet":
        path = Path(path)
        return cls.from_json(json.loads(path.read_text()), path.parent)


def _resolve_ref(ref: str, base: Path, cache: dict) -> np.ndarray:
    fname, sep, line = str(ref).rpartition(":")
    if not sep or not line.isdigit():
        raise GuidanceError(f"dataset reference must look like 'file:line', got {ref!r}")
    path = (base / fname).resolve()
    if path not in cache:
        if not path.exists():
            raise GuidanceError(f"referenced dataset not found: {path}")
        cache[path] = read_dataset(path).trajectories
    trajs = cache[path]
    i = int(line) - 1
    if not 0 <= i < len(trajs):
        raise GuidanceError(f"{ref}: line out of range 1..{len(trajs)}")
    return trajs[i].terminal_observation


@dataclass(frozen=True)
class GuidanceConfig:
    s: float = 1.5
    sigma: float = 30.0
    M: int = 4
    distance: str = "euclidean"
    metric: str = "latent"

    def __post_init__(self):
        if self.s < 0:
            raise GuidanceError(f"guidance strength must be >= 0, got {self.s}")
        if not self.sigma > 0:
            raise GuidanceError(f"sigma must be > 0, got {self.sigma}")
        if int(self.M) != self.M or self.M < 1:
            raise GuidanceError(f"M must be a positive integer, got {self.M}")
        if self.distance not in DISTANCE_MODES:
            raise GuidanceError(f"distance must be one of {DISTANCE_MODES}, got {self.distance!r}")
        if self.metric not in METRIC_MODES:
            raise GuidanceError(f"metric must be one of {METRIC_MODES}, got {self.metric!r}")


# metrics -----------------------------------------------------------------------

def _distances(tape: Tape, z: Tensor, conds: np.ndarray, distance: str) -> Tensor:
    """Distances from each row of ``z`` (B, D) to its conditions -> (B, n)."""
    diff = tape.sub(tape.reshape(z, (z.shape[0], 1, z.shape[1])), conds)
    if distance == "euclidean":
        return tape.norm(diff, axis=-1)
    return tape.sum(tape.square(diff), axis=-1)


def latent_metric(tape: Tape, z: Tensor, positives: np.ndarray, negatives: np.ndarray, sigma: float,
                  distance: str = "euclidean") -> Tensor:
    """Soft-max contrast of distances to positive and negative conditions, one value per row."""
    terms = []
    for conds, sign in ((positives, 1.0), (negatives, -1.0)):
        if conds.size == 0:
            continue
        lse = tape.logsumexp(tape.scale(_distances(tape, z, conds, distance), -1.0 / sigma), axis=1)
        terms.append(lse if sign > 0 else tape.neg(lse))
    if not terms:
        raise GuidanceError("metric needs at least one positive or negative condition")
    return terms[0] if len(terms) == 1 else tape.add(terms[0], terms[1])


def metric_d(gset: GuidanceSet, z_pred, sigma: float, distance: str = "euclidean"):
    """Evaluate the guidance metric for one latent (D,) or a batch (B, D)."""
    gset.check("latent")
    z = np.asarray(z_pred, dtype=np.float64)
    single = z.ndim == 1
    tape = Tape()
    d = latent_metric(tape, Tensor(np.atleast_2d(z)), gset.positives, gset.negatives, sigma, distance)
    return float(d.data[0]) if single else d.data


def classifier_metric(tape: Tape, logits: Tensor, targets: Sequence[int], avoid: Sequence[int]) -> Tensor:
    """log P(outcome in targets) - log P(outcome in avoid), one value per row.

    A missing side contributes 0, so with one target this is the negative
    cross-entropy against that target's one-hot vector.
    """
    logp = tape.log_softmax(logits, axis=1)
    terms = []
    if targets:
        terms.append(tape.logsumexp(tape.index(logp, (slice(None), list(targets))), axis=1))
    if avoid:
        terms.append(tape.neg(tape.logsumexp(tape.index(logp, (slice(None), list(avoid))), axis=1)))
    if not terms:
        raise GuidanceError("classifier metric needs a target or avoided color")
    return terms[0] if len(terms) == 1 else tape.add(terms[0], terms[1])


def metric_xent(logits, target_onehot) -> float:
    """Negative cross-entropy of ``logits`` against a one-hot target."""
    logits = np.asarray(logits, dtype=np.float64)
    onehot = np.asarray(target_onehot, dtype=np.float64)
    if onehot.shape != logits.shape or np.sum(onehot == 1.0) != 1 or np.sum(onehot == 0.0) != onehot.size - 1:
        raise GuidanceError(f"target must be a one-hot vector of length {logits.shape[-1]}")
    tape = Tape()
    return float(classifier_metric(tape, Tensor(logits[None]), [int(np.argmax(onehot))], []).data[0])


def chunk_endpoint(tape: Tape, a: Tensor, chunk_mode: str) -> Tensor:
    """Total displacement of normalized chunks (B, L, 2) -> (B, 2)."""
    if chunk_mode == "deltas":
        return tape.scale(tape.sum(a, axis=1), DELTA_MAX)
    return tape.scale(tape.index(a, (slice(None), -1)), WAYPOINT_SCALE)


def position_metric(chunk, agent_pos, target_point) -> float:
    """-|agent + sum(deltas) - target|^2 for one raw-delta chunk."""
    end = np.asarray(agent_pos, dtype=np.float64) + np.sum(np.asarray(chunk, dtype=np.float64), axis=0)
    return -float(np.sum((end - np.asarray(target_point, dtype=np.float64)) ** 2))


# objectives ----------------------------------------------------------------------

class Objective(Protocol):
    def __call__(self, obs: np.ndarray, a: Tensor, tape: Tape) -> Tensor: ...


@dataclass
class LatentObjective:
    dynamics: DynamicsModel
    gset: GuidanceSet
    sigma: float = 30.0
    distance: str = "euclidean"

    def __post_init__(self):
        self.gset.check("latent")

    def __call__(self, obs, a, tape):
        z = self.dynamics.predict_outcome(obs, a, tape)
        pos, neg = self.gset.positives, self.gset.negatives
        return latent_metric(tape, z, pos, neg, self.sigma, self.distance)


@dataclass
class ClassifierObjective:
    dynamics: DynamicsModel
    gset: GuidanceSet

    def __post_init__(self):
        self.gset.check("classifier")

    def __call__(self, obs, a, tape):
        logits = self.dynamics.predict_logits(obs, a, tape)
        return classifier_metric(tape, logits, self.gset.target_colors, self.gset.avoid_colors)


@dataclass
class PositionObjective:
    """Steer the chunk's endpoint towards a fixed point (per row or shared)."""

    target_point: np.ndarray
    chunk_mode: str = "waypoints"

    def __call__(self, obs, a, tape):
        end = tape.add(chunk_endpoint(tape, a, self.chunk_mode), obs[:, :2])
        err = tape.sub(end, np.broadcast_to(self.target_point, (obs.shape[0], 2)))
        return tape.neg(tape.sum(tape.square(err), axis=1))


def make_objective(dynamics: DynamicsModel, gset: GuidanceSet, cfg: GuidanceConfig) -> Objective:
    if cfg.metric == "classifier":
        return ClassifierObjective(dynamics, gset)
    return LatentObjective(dynamics, gset, cfg.sigma, cfg.distance)


def position_target(gset: GuidanceSet) -> np.ndarray:
    """Mean final agent position over the positive conditions."""
    if gset.n_positive == 0:
        raise GuidanceError("position guidance needs positive conditions")
    return gset.positives[..., :2].mean(axis=-2)


def score(objective: Objective, obs, a) -> np.ndarray:
    """Objective values for normalized chunks without gradients."""
    return objective(check_obs(obs), Tensor(np.asarray(a, dtype=np.float64)), Tape()).data


def grad_metric(objective: Objective, obs, a_k) -> tuple[np.ndarray, np.ndarray]:
    """Per-row gradient of the objective with respect to ``a_k`` and its value.

    Rows are independent, so seeding the backward pass with ones yields every
    row's own gradient at once. Rows with a non-finite gradient get zeros.
    """
    obs = check_obs(obs)
    a = Tensor(np.asarray(a_k, dtype=np.float64), requires_grad=True)
    tape = Tape()
    d = objective(obs, a, tape)
    grad = backward(tape, np.ones(d.shape), d).get(a)
    if grad is None:
        grad = np.zeros(a.shape)
    bad = ~np.all(np.isfinite(grad.reshape(len(grad), -1)), axis=1)
    if bad.any():
        log.warning("non-finite guidance gradient in %d row(s); skipping guidance there", int(bad.sum()))
        grad = grad.copy()
        grad[bad] = 0.0
    return grad, d.data


def guided_epsilon(eps, grad, s: float, alpha_bar: float) -> np.ndarray:
    """Shift the noise estimate up the metric gradient."""
    return eps - s * math.sqrt(1.0 - alpha_bar) * grad


@dataclass
class SampleTrace:
    """Mean metric value of the batch at each denoising visit, plus endpoints."""

    d: list[np.ndarray] = field(default_factory=list)
    levels: list[int] = field(default_factory=list)


def guided_sample_normalized(policy: DiffusionPolicy, objective: Objective | None, obs, cfg: GuidanceConfig,
                             rng: Rng, goal=None, trace: SampleTrace | None = None) -> np.ndarray:
    """Guided denoising with M stochastic repeats per level.

    For the first M - 1 repeats at a level the sample is denoised one DDIM
    step and then diffused back to that level with fresh noise, so each
    repeat refines the same level before the sampler moves on.
    """
    obs = check_obs(obs)
    sched = policy.schedule_
    a = policy.initial_noise(rng, obs.shape[0])
    guided = objective is not None and cfg.s != 0.0
    for k, k_next in sched.step_pairs:
        ab = sched.alpha_bars[k]
        for i in range(cfg.M):
            eps = policy.predict_epsilon(a, obs, k, goal)
            if guided:
                grad, d = grad_metric(objective, obs, a)
                eps = guided_epsilon(eps, grad, cfg.s, ab)
                if trace is not None:
                    trace.d.append(d)
                    trace.levels.append(k)
            a_next = ddim_step(a, eps, k, k_next, sched)
            if i < cfg.M - 1:
                a = renoise(a_next, k_next, k, rng.gaussian(a.shape), sched)
            else:
                a = a_next
    if trace is not None and objective is not None:
        trace.d.append(score(objective, obs, a))
        trace.levels.append(0)
    return a


def guided_sample(policy: DiffusionPolicy, objective: Objective | None, obs, cfg: GuidanceConfig, rng: Rng,
                  goal=None, trace: SampleTrace | None = None) -> np.ndarray:
    """Guided chunk in raw position deltas, one per observation row."""
    a = guided_sample_normalized(policy, objective, obs, cfg, rng, goal, trace)
    return decode_chunks(a, policy.chunk_mode)


def color_onehot(color) -> np.ndarray:
    return np.eye(N_COLORS)[color_index(color)]
