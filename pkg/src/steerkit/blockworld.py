"""BlockTouch: a point agent in the unit square touching one of four colored squares.

Geometry constants are desk-scale choices (no published values exist). The
observation lists squares nearest-first by Chebyshev distance to the agent,
so in a terminal observation the first slot is always the touched square.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .numerics.rng import Rng

N_COLORS = 4
COLOR_NAMES = ("red", "green", "blue", "yellow")
OBS_DIM = 2 + 2 * N_COLORS + N_COLORS * N_COLORS
DELTA_MAX = 0.05
HALF_SIZE = 0.04
HORIZON = 120
START_CLEARANCE = 0.03
MAX_RESET_ATTEMPTS = 10_000
MAX_DEMO_STEPS = 500
LAYOUT_SPECS = ("random", "early_decision", "late_decision", "furthest_cube")
DATA_FORMAT = "steerkit-data-v1"


class LayoutError(RuntimeError):
    pass


def color_index(color) -> int:
    if isinstance(color, str):
        if color.isdigit():
            return int(color)
        return COLOR_NAMES.index(color)
    c = int(color)
    if not 0 <= c < N_COLORS:
        raise ValueError(f"color index {c} outside 0..{N_COLORS - 1}")
    return c


@dataclass(frozen=True)
class Layout:
    """Square centers indexed by color (row c is the square of color c)."""

    centers: np.ndarray
    half_size: float = HALF_SIZE

    def contains(self, p) -> int | None:
        """Color of the first square whose closed box holds ``p``."""
        d = np.max(np.abs(self.centers - np.asarray(p)), axis=1)
        hit = np.flatnonzero(d <= self.half_size)
        return int(hit[0]) if hit.size else None


@dataclass(frozen=True)
class EnvState:
    agent: np.ndarray
    layout: Layout
    t: int = 0
    touched: int | None = None

    @property
    def done(self) -> bool:
        return self.touched is not None or self.t >= HORIZON


@dataclass
class Trajectory:
    observations: np.ndarray  # (T + 1, OBS_DIM), last row is the terminal observation
    actions: np.ndarray  # (T, 2)
    label: int | None
    layout_seed: int = 0

    @property
    def terminal_observation(self) -> np.ndarray:
        return self.observations[-1]

    def __len__(self):
        return len(self.actions)


# observations --------------------------------------------------------------

def slot_order(agent: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Color indices sorted nearest-first (Chebyshev); ties by color index."""
    d = np.max(np.abs(centers - agent), axis=-1)
    return np.argsort(d, axis=-1, kind="stable")


def observe_batch(agents: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Observations for ``agents`` (B, 2) in layouts ``centers`` (B, 4, 2)."""
    agents = np.asarray(agents, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    b = agents.shape[0]
    order = slot_order(agents[:, None, :], centers)
    sorted_centers = np.take_along_axis(centers, order[:, :, None], axis=1)
    onehot = np.eye(N_COLORS)[order]
    return np.concatenate([agents, sorted_centers.reshape(b, -1), onehot.reshape(b, -1)], axis=1)


def observe(state: EnvState) -> np.ndarray:
    return observe_batch(state.agent[None], state.layout.centers[None])[0]


def decode_observation(obs) -> tuple[np.ndarray, np.ndarray]:
    """Recover (agent, centers indexed by color) from an observation."""
    obs = np.asarray(obs, dtype=np.float64)
    agent = obs[:2]
    slots = obs[2:2 + 2 * N_COLORS].reshape(N_COLORS, 2)
    colors = obs[2 + 2 * N_COLORS:].reshape(N_COLORS, N_COLORS).argmax(axis=1)
    centers = np.empty_like(slots)
    centers[colors] = slots
    return agent.copy(), centers


def state_from_observation(obs, half_size: float = HALF_SIZE) -> EnvState:
    agent, centers = decode_observation(obs)
    return EnvState(agent, Layout(centers, half_size))


# dynamics ------------------------------------------------------------------

def clamp_norm(delta, max_norm: float = DELTA_MAX) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    n = np.linalg.norm(delta, axis=-1, keepdims=True)
    scale = np.where(n > max_norm, max_norm / np.maximum(n, 1e-300), 1.0)
    return delta * scale


def step(state: EnvState, delta) -> tuple[EnvState, int | None]:
    if state.done:
        raise RuntimeError("step() on a terminal state")
    agent = np.clip(state.agent + clamp_norm(delta), 0.0, 1.0)
    touched = state.layout.contains(agent)
    return EnvState(agent, state.layout, state.t + 1, touched), touched


def step_batch(agents: np.ndarray, centers: np.ndarray, deltas: np.ndarray,
               half_size: float = HALF_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`step`. Returns new agents and touched colors (-1 = none)."""
    agents = np.clip(agents + clamp_norm(deltas), 0.0, 1.0)
    inside = np.max(np.abs(centers - agents[:, None, :]), axis=-1) <= half_size
    touched = np.where(inside.any(axis=1), inside.argmax(axis=1), -1)
    return agents, touched


# layouts -------------------------------------------------------------------

def _no_overlap(centers: np.ndarray, half_size: float) -> bool:
    for i in range(len(centers)):
        for j in range(i + 1, len(centers)):
            if np.max(np.abs(centers[i] - centers[j])) < 2 * half_size:
                return False
    return True


def _outside(agent, centers, margin: float) -> bool:
    return bool(np.all(np.max(np.abs(centers - agent), axis=1) > margin))


def _sample_random(rng: Rng, h: float):
    centers = rng.uniform(h, 1 - h, (N_COLORS, 2))
    agent = rng.uniform(size=(2,))
    return agent, centers


def _sample_early(rng: Rng, h: float):
    quads = np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 0.5], [0.5, 0.5]])
    perm = rng.permutation(N_COLORS)
    centers = quads[perm] + rng.uniform(h, 0.5 - h, (N_COLORS, 2))
    r = 0.1 * math.sqrt(rng.uniform())
    theta = 2 * math.pi * rng.uniform()
    agent = np.array([0.5 + r * math.cos(theta), 0.5 + r * math.sin(theta)])
    return agent, centers


def _sample_late(rng: Rng, h: float):
    hub = rng.uniform(0.25, 0.75, (2,))
    r = 0.15 * np.sqrt(rng.uniform(size=(N_COLORS,)))
    theta = 2 * math.pi * rng.uniform(size=(N_COLORS,))
    centers = hub + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    agent = rng.uniform(size=(2,))
    if np.linalg.norm(agent - hub) < 0.35 or np.any(centers < h) or np.any(centers > 1 - h):
        return None
    return agent, centers


def _sample_furthest(rng: Rng, h: float):
    # canonical frame: agent on the left, blue on the right, the rest between
    agent = np.array([rng.uniform(0.03, 0.12), rng.uniform(0.2, 0.8)])
    centers = np.empty((N_COLORS, 2))
    blue = COLOR_NAMES.index("blue")
    centers[blue] = [rng.uniform(0.86, 1 - h), rng.uniform(0.2, 0.8)]
    others = [c for c in range(N_COLORS) if c != blue]
    centers[others] = np.stack([rng.uniform(0.35, 0.65, (3,)), rng.uniform(0.15, 0.85, (3,))], axis=1)
    rot = rng.integers(4)
    for _ in range(rot):  # quarter turns about the arena center
        agent = np.array([1 - agent[1], agent[0]])
        centers = np.stack([1 - centers[:, 1], centers[:, 0]], axis=1)
    return agent, centers


_SAMPLERS = {
    "random": _sample_random,
    "early_decision": _sample_early,
    "late_decision": _sample_late,
    "furthest_cube": _sample_furthest,
}


def reset(rng: Rng, layout_spec: str = "random", half_size: float = HALF_SIZE) -> EnvState:
    """Rejection-sample a layout and agent start satisfying ``layout_spec``."""
    if layout_spec not in _SAMPLERS:
        raise ValueError(f"unknown layout spec {layout_spec!r}; expected one of {LAYOUT_SPECS}")
    sampler = _SAMPLERS[layout_spec]
    for _ in range(MAX_RESET_ATTEMPTS):
        drawn = sampler(rng, half_size)
        if drawn is None:
            continue
        agent, centers = drawn
        if _no_overlap(centers, half_size) and _outside(agent, centers, half_size + START_CLEARANCE):
            return EnvState(agent, Layout(centers, half_size))
    raise LayoutError(f"no layout satisfying spec {layout_spec!r} after {MAX_RESET_ATTEMPTS} attempts")


def enclosing_radius(points: np.ndarray) -> float:
    """Radius of the smallest disc containing ``points`` (brute force, small n)."""
    pts = np.asarray(points, dtype=np.float64)
    best = math.inf
    cands = [(pts[i] + pts[j]) / 2 for i in range(len(pts)) for j in range(i, len(pts))]
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            for k in range(j + 1, len(pts)):
                a, b, c = pts[i], pts[j], pts[k]
                d = 2 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
                if abs(d) < 1e-15:
                    continue
                ux = ((a @ a) * (b[1] - c[1]) + (b @ b) * (c[1] - a[1]) + (c @ c) * (a[1] - b[1])) / d
                uy = ((a @ a) * (c[0] - b[0]) + (b @ b) * (a[0] - c[0]) + (c @ c) * (b[0] - a[0])) / d
                cands.append(np.array([ux, uy]))
    for q in cands:
        r = float(np.max(np.linalg.norm(pts - q, axis=1)))
        best = min(best, r)
    return best


def layout_satisfies(state: EnvState, layout_spec: str) -> bool:
    """Checkable predicate for each layout spec."""
    c, a, h = state.layout.centers, state.agent, state.layout.half_size
    base = (
        _no_overlap(c, h)
        and bool(np.all((c >= h) & (c <= 1 - h)))
        and _outside(a, c, h)
    )
    if not base:
        return False
    if layout_spec == "random":
        return True
    if layout_spec == "early_decision":
        quads = (c[:, 0] >= 0.5).astype(int) + 2 * (c[:, 1] >= 0.5).astype(int)
        quad_centers = 0.25 + 0.5 * np.stack([quads % 2, quads // 2], axis=1)
        fits = np.all(np.abs(c - quad_centers) <= 0.25 - h + 1e-12)
        return sorted(quads.tolist()) == [0, 1, 2, 3] and bool(fits)
    if layout_spec == "late_decision":
        return enclosing_radius(c) <= 0.15 + 1e-12
    if layout_spec == "furthest_cube":
        blue = COLOR_NAMES.index("blue")
        axis = c[blue] - a
        length = np.linalg.norm(axis)
        proj = (c - a) @ axis / length
        others = [i for i in range(N_COLORS) if i != blue]
        return length >= 0.6 and bool(np.all((proj[others] > 0) & (proj[others] < length)))
    raise ValueError(f"unknown layout spec {layout_spec!r}")


# demonstrations ------------------------------------------------------------

def bezier(control: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Evaluate a Bezier curve with control points (n, 2) at params ``t``."""
    n = len(control) - 1
    t = np.asarray(t)[:, None]
    out = np.zeros((len(t), 2))
    for i, p in enumerate(control):
        out += math.comb(n, i) * (1 - t) ** (n - i) * t ** i * p
    return out


def discretize(control: np.ndarray, max_step: float = DELTA_MAX, resolution: int = 2048) -> np.ndarray:
    """Waypoints along the curve, equally spaced in arc length, no gap above ``max_step``."""
    dense = bezier(control, np.linspace(0.0, 1.0, resolution))
    seg = np.linalg.norm(np.diff(dense, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(1, int(math.ceil(arc[-1] / max_step - 1e-9)))
    s = np.linspace(0.0, arc[-1], n + 1)
    pts = np.stack([np.interp(s, arc, dense[:, 0]), np.interp(s, arc, dense[:, 1])], axis=1)
    pts[0], pts[-1] = dense[0], dense[-1]
    return pts


def rollout_actions(state: EnvState, actions: Iterable) -> tuple[list[EnvState], list[np.ndarray], int | None]:
    """Apply actions until touch or exhaustion. Returns (states, executed actions, label)."""
    states, done = [state], []
    for a in actions:
        if state.done:
            break
        state, touched = step(state, a)
        states.append(state)
        done.append(np.asarray(a, dtype=np.float64))
        if touched is not None:
            return states, done, touched
    return states, done, None


def generate_demo(rng: Rng, state: EnvState, target_color, max_tries: int = 200,
                  layout_seed: int = 0) -> Trajectory:
    """Bezier demonstration from the agent to a random point in the target square.

    Curves that touch another square first, or need more than
    ``MAX_DEMO_STEPS`` steps, are redrawn with fresh control points.
    """
    target = color_index(target_color)
    center = state.layout.centers[target]
    h = state.layout.half_size
    for _ in range(max_tries):
        n_mid = rng.integers(3)
        end = center + rng.uniform(-h, h, (2,))
        mids = rng.uniform(size=(n_mid, 2)) if n_mid else np.zeros((0, 2))
        control = np.vstack([state.agent, mids, end])
        pts = discretize(control)
        if len(pts) - 1 > MAX_DEMO_STEPS:
            continue
        states, acts, label = rollout_actions(state, np.diff(pts, axis=0))
        if label != target:
            continue
        obs = observe_batch(np.stack([s.agent for s in states]),
                            np.broadcast_to(state.layout.centers, (len(states), N_COLORS, 2)))
        return Trajectory(obs, np.array(acts), label, layout_seed)
    raise LayoutError(f"could not route a demo to color {target} in {max_tries} tries")


def demo_for_layout(seed: int, layout_spec: str, target_color) -> Trajectory:
    """Demo whose initial state is ``reset(Rng(seed), layout_spec)``."""
    rng = Rng(seed)
    state = reset(rng, layout_spec)
    return generate_demo(rng, state, target_color, layout_seed=seed)


def in_distribution_goal(rng: Rng, state: EnvState, target_color) -> np.ndarray:
    """Terminal observation of a demo replaying this very initial state."""
    return generate_demo(rng, state, target_color).terminal_observation


def underspecified_goal(rng: Rng, state: EnvState, target_color) -> np.ndarray:
    """Observation of a perturbed copy of ``state`` with nothing touched.

    The target square keeps its place; the agent and the other squares are
    redrawn, so the agent is not shown at the target and only the target
    square is shared by every goal drawn for the same state.
    """
    target = color_index(target_color)
    h = state.layout.half_size
    for _ in range(MAX_RESET_ATTEMPTS):
        agent, centers = _sample_random(rng, h)
        centers[target] = state.layout.centers[target]
        if _no_overlap(centers, h) and _outside(agent, centers, h + START_CLEARANCE):
            return observe(EnvState(agent, Layout(centers, h)))
    raise LayoutError("could not perturb the layout around the target square")


# datasets ------------------------------------------------------------------

@dataclass
class Dataset:
    trajectories: list[Trajectory]
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    def counts(self) -> dict[str, int]:
        out = {name: 0 for name in COLOR_NAMES}
        for tr in self.trajectories:
            if tr.label is not None:
                out[COLOR_NAMES[tr.label]] += 1
        return out

    def by_color(self, color) -> list[Trajectory]:
        c = color_index(color)
        return [tr for tr in self.trajectories if tr.label == c]


def _retention_map(retention: Mapping | None) -> list[float]:
    frac = [1.0] * N_COLORS
    for k, v in (retention or {}).items():
        v = float(v)
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"retention for {k!r} must lie in [0, 1], got {v}")
        frac[color_index(k)] = v
    return frac


def build_dataset(rng: Rng, n_per_color: int, layout_spec: str = "random",
                  retention: Mapping | None = None) -> Dataset:
    """Demos for every color, ``round(n_per_color * retention[c])`` each, fresh layout per demo."""
    frac = _retention_map(retention)
    trajs = []
    counts = {}
    for c in range(N_COLORS):
        n = int(math.floor(n_per_color * frac[c] + 0.5))
        counts[COLOR_NAMES[c]] = n
        for _ in range(n):
            seed = rng.next_u64()
            trajs.append(demo_for_layout(seed, layout_spec, c))
    manifest = {
        "format": DATA_FORMAT,
        "counts": counts,
        "n_per_color": n_per_color,
        "layout_spec": layout_spec,
        "retention": dict(zip(COLOR_NAMES, frac)),
        "seed": rng.seed,
    }
    return Dataset(trajs, manifest)


def trajectory_to_json(tr: Trajectory) -> dict:
    return {
        "obs": tr.observations[:-1].tolist(),
        "act": tr.actions.tolist(),
        "terminal_obs": tr.terminal_observation.tolist(),
        "label": tr.label,
        "layout_seed": int(tr.layout_seed),
    }


def trajectory_from_json(doc: Mapping) -> Trajectory:
    obs = np.array(doc["obs"] + [doc["terminal_obs"]], dtype=np.float64).reshape(-1, OBS_DIM)
    acts = np.array(doc["act"], dtype=np.float64).reshape(-1, 2)
    return Trajectory(obs, acts, doc["label"], int(doc.get("layout_seed", 0)))


def write_dataset(dataset: Dataset, out_dir, name: str = "demos") -> Path:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{name}.jsonl"
        with open(path, "w") as fh:
            for tr in dataset:
                fh.write(json.dumps(trajectory_to_json(tr)) + "\n")
        manifest = dict(dataset.manifest, file=path.name, n_trajectories=len(dataset))
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except OSError as exc:
        raise OSError(f"failed writing dataset under {out_dir}: {exc}") from exc
    return path


def read_dataset(path) -> Dataset:
    path = Path(path)
    if path.is_dir():
        manifest = json.loads((path / "manifest.json").read_text())
        path = path / manifest.get("file", "demos.jsonl")
    else:
        mpath = path.parent / "manifest.json"
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    if manifest and manifest.get("format") != DATA_FORMAT:
        raise ValueError(f"{path}: unexpected dataset format {manifest.get('format')!r}")
    with open(path) as fh:
        trajs = [trajectory_from_json(json.loads(line)) for line in fh if line.strip()]
    return Dataset(trajs, manifest)


def replay_label(tr: Trajectory) -> int | None:
    """Label obtained by replaying the stored actions from the first observation."""
    _, _, label = rollout_actions(state_from_observation(tr.observations[0]), tr.actions)
    return label


def terminal_observations(trajs: Sequence[Trajectory]) -> np.ndarray:
    return np.stack([tr.terminal_observation for tr in trajs])
