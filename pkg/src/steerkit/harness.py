"""Episode rollouts, experiment orchestration, statistics and reports.

Episodes of one seed run in lockstep: every active episode is queried for a
chunk at the same time and the chunks are executed together. Each episode
draws its layout from its own stream, so results depend only on the seed.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .baselines import METHODS, RankConfig, cfg_sample, goal_rollout, sample_and_rank
from .blockworld import (COLOR_NAMES, HORIZON, LAYOUT_SPECS, N_COLORS, OBS_DIM, Dataset, EnvState,
                         color_index, in_distribution_goal, observe_batch, read_dataset, reset, step_batch,
                         underspecified_goal)
from .diffusion import DiffusionPolicy, SamplingError
from .dynamics import DynamicsModel
from .guidance import (GuidanceConfig, GuidanceSet, PositionObjective, SampleTrace, guided_sample,
                       make_objective, position_target)
from .numerics import Rng

log = logging.getLogger(__name__)

EXP_FORMAT = "steerkit-exp-v1"
EXPERIMENTS = ("steer", "multi_objective", "avoidance", "underrepresented", "noise_ablation", "grid_search")
GOAL_SOURCES = ("dataset", "file", "in_distribution", "underspecified")
BEHAVIORS = COLOR_NAMES + ("none",)
NONE = N_COLORS  # column of the no-behavior bucket


class ConfigError(ValueError):
    pass


# models and methods -----------------------------------------------------------

@dataclass
class Models:
    policy: DiffusionPolicy | None = None
    dynamics: DynamicsModel | None = None
    goal_policy: DiffusionPolicy | None = None


@dataclass(frozen=True)
class MethodConfig:
    """Everything a method needs besides models and guidance conditions."""

    name: str = "base"
    guidance: GuidanceConfig = GuidanceConfig()
    rank: RankConfig = RankConfig()
    cfg_w: float = 1.0
    itps_s: float = 1.0

    def __post_init__(self):
        if self.name not in METHODS:
            raise ConfigError(f"unknown method {self.name!r}; expected one of {METHODS}")


def check_method(method: MethodConfig, models: Models, gset: GuidanceSet | None):
    """Reject model/guidance mismatches before any episode runs."""
    name = method.name
    if name in ("goal", "cfg"):
        if models.goal_policy is None or not models.goal_policy.goal_conditioned:
            raise ConfigError(f"method {name!r} needs a goal-conditioned policy")
        if gset is None or gset.n_positive == 0:
            raise ConfigError(f"method {name!r} needs positive goal observations")
        return
    if models.policy is None:
        raise ConfigError(f"method {name!r} needs a base policy")
    if name in ("dynaguide", "gpc"):
        if models.dynamics is None:
            raise ConfigError(f"method {name!r} needs a dynamics model")
        if gset is None:
            raise ConfigError(f"method {name!r} needs a guidance set")
        gset.check(method.guidance.metric)
        head = "latent" if method.guidance.metric == "latent" else "classifier"
        if hasattr(models.dynamics, "params_") and head not in models.dynamics.params_:
            raise ConfigError(f"dynamics model has no {head} head")
    if name == "itps" and (gset is None or gset.n_positive == 0):
        raise ConfigError("method 'itps' needs positive conditions for its target point")


def _rows(gset: GuidanceSet, idx: np.ndarray) -> GuidanceSet:
    """Restrict per-episode condition sets to the active rows."""
    pos = gset.positives[idx] if gset.positives.ndim == 3 else gset.positives
    neg = gset.negatives[idx] if gset.negatives.ndim == 3 else gset.negatives
    return GuidanceSet(pos, neg, gset.target_colors, gset.avoid_colors)


ChunkFn = Callable[[np.ndarray, Rng, np.ndarray], np.ndarray]


def make_chunk_fn(method: MethodConfig, models: Models, gset: GuidanceSet | None, goals: np.ndarray | None = None,
                  traces: dict | None = None) -> ChunkFn:
    """Build ``f(obs, rng, rows) -> raw chunks`` for the active episode ``rows``.

    ``goals`` (n_episodes, 26) fixes each episode's goal for "goal"; without it
    the caller must supply one.
    """
    check_method(method, models, gset)
    name = method.name
    if name == "base":
        return lambda obs, rng, rows: models.policy.sample(obs, rng)
    if name == "goal":
        if goals is None:
            raise ConfigError("goal rollout needs one goal per episode")
        return lambda obs, rng, rows: goal_rollout(models.goal_policy, obs, goals[rows], rng)
    if name == "cfg":
        def cfg_fn(obs, rng, rows):
            g = gset.positives[rows] if gset.positives.ndim == 3 else gset.positives
            return cfg_sample(models.goal_policy, obs, g, method.cfg_w, rng)
        return cfg_fn
    if name == "itps":
        target = position_target(gset)
        icfg = GuidanceConfig(s=method.itps_s, sigma=1.0, M=method.guidance.M)

        def itps_fn(obs, rng, rows):
            pt = target[rows] if target.ndim == 2 else target
            return guided_sample(models.policy, PositionObjective(pt, models.policy.chunk_mode), obs, icfg, rng)
        return itps_fn
    if name == "gpc":
        def gpc_fn(obs, rng, rows):
            obj = make_objective(models.dynamics, _rows(gset, rows), method.guidance)
            return sample_and_rank(models.policy, obj, obs, rng, method.rank)
        return gpc_fn

    def dg_fn(obs, rng, rows):
        obj = make_objective(models.dynamics, _rows(gset, rows), method.guidance)
        trace = SampleTrace() if traces is not None else None
        chunk = guided_sample(models.policy, obj, obs, method.guidance, rng, trace=trace)
        if trace is not None and trace.d:
            d = np.stack(trace.d)  # (visits, rows)
            for j, r in enumerate(rows):
                traces.setdefault(int(r), []).append(d[:, j].copy())
        return chunk
    return dg_fn


# episodes ------------------------------------------------------------------------

@dataclass
class EpisodeResult:
    behavior: int | None
    steps: int
    seed: int
    index: int = 0
    error: str | None = None
    d_trace: list = field(default_factory=list)  # per chunk: metric at each denoising visit

    @property
    def behavior_name(self) -> str:
        return "none" if self.behavior is None else COLOR_NAMES[self.behavior]


def run_episodes(chunk_fn: ChunkFn, states: Sequence[EnvState], rng: Rng, execute_len: int = 14,
                 horizon: int = HORIZON, seed: int = 0, traces: dict | None = None) -> list[EpisodeResult]:
    """Roll out all ``states`` together until touch or horizon.

    A chunk is requested for every active episode, then up to ``execute_len``
    steps of it run open-loop; an episode stops as soon as it touches a square.
    """
    n = len(states)
    agents = np.stack([s.agent for s in states]).astype(np.float64)
    centers = np.stack([s.layout.centers for s in states])
    half = states[0].layout.half_size if n else 0.0
    behavior = np.full(n, -1)
    steps = np.zeros(n, dtype=np.int64)
    errors: dict[int, str] = {}
    active = np.ones(n, dtype=bool)
    t = 0
    while active.any() and t < horizon:
        rows = np.flatnonzero(active)
        try:
            chunk = np.asarray(chunk_fn(observe_batch(agents[rows], centers[rows]), rng, rows))
            bad = ~np.all(np.isfinite(chunk.reshape(len(rows), -1)), axis=1)
        except SamplingError as exc:
            chunk, bad = None, np.ones(len(rows), dtype=bool)
            for r in rows:
                errors[int(r)] = str(exc)
        if bad.any():
            for r in rows[bad]:
                errors.setdefault(int(r), "non-finite action chunk")
            active[rows[bad]] = False
            if chunk is None:
                break
            chunk, rows = chunk[~bad], rows[~bad]
        for j in range(min(execute_len, horizon - t, chunk.shape[1] if len(rows) else 0)):
            moved, touched = step_batch(agents[rows], centers[rows], chunk[:, j], half)
            agents[rows] = moved
            steps[rows] += 1
            hit = touched >= 0
            behavior[rows[hit]] = touched[hit]
            active[rows[hit]] = False
            rows, chunk = rows[~hit], chunk[~hit]
            if len(rows) == 0:
                break
        t += execute_len
    out = []
    for i in range(n):
        out.append(EpisodeResult(None if behavior[i] < 0 else int(behavior[i]), int(steps[i]), seed, i,
                                 errors.get(i), (traces or {}).get(i, [])))
    return out


def episode_states(seed: int, n: int, layout_spec: str = "random") -> list[EnvState]:
    """Initial states of a seed's episodes; episode i uses its own split stream."""
    root = Rng(seed)
    return [reset(root.split(i + 1), layout_spec) for i in range(n)]


def rollout_rng(seed: int) -> Rng:
    return Rng(seed).split(0x5EED)


def run_episode(method: MethodConfig, models: Models, state: EnvState, gset: GuidanceSet | None, rng: Rng,
                goal: np.ndarray | None = None, horizon: int = HORIZON, trace: bool = False) -> EpisodeResult:
    """One episode of ``method`` from ``state``."""
    traces = {} if trace else None
    fn = make_chunk_fn(method, models, gset, None if goal is None else np.asarray(goal)[None], traces)
    policy = models.goal_policy if method.name in ("goal", "cfg") else models.policy
    return run_episodes(fn, [state], rng, policy.execute_len, horizon, traces=traces)[0]


# statistics ---------------------------------------------------------------------------

def frequencies(results: Sequence[EpisodeResult]) -> np.ndarray:
    """Fraction of episodes per behavior (colors then none); sums to 1."""
    counts = np.zeros(N_COLORS + 1)
    for r in results:
        counts[NONE if r.behavior is None else r.behavior] += 1
    return counts / max(1, len(results))


@dataclass
class BehaviorTable:
    """Per-method behavior frequencies, one row per seed."""

    rows: dict[str, np.ndarray] = field(default_factory=dict)  # label -> (n_seeds, 5)
    seeds: dict[str, list[int]] = field(default_factory=dict)

    def add(self, label: str, seed: int, freq: np.ndarray):
        prev = self.rows.get(label, np.zeros((0, N_COLORS + 1)))
        self.rows[label] = np.vstack([prev, np.asarray(freq, dtype=np.float64)[None]])
        self.seeds.setdefault(label, []).append(int(seed))

    @property
    def labels(self) -> list[str]:
        return list(self.rows)

    def mean(self, label: str) -> np.ndarray:
        return self.rows[label].mean(axis=0)

    def stderr(self, label: str) -> np.ndarray:
        r = self.rows[label]
        if len(r) < 2:
            return np.zeros(r.shape[1])
        return r.std(axis=0, ddof=1) / math.sqrt(len(r))

    def rate(self, label: str, behavior) -> float:
        col = NONE if behavior in (None, "none") else color_index(behavior)
        return float(self.mean(label)[col])

    def to_json(self) -> dict:
        return {
            "behaviors": list(BEHAVIORS),
            "methods": {
                label: {
                    "seeds": self.seeds[label],
                    "per_seed": self.rows[label].tolist(),
                    "mean": self.mean(label).tolist(),
                    "stderr": self.stderr(label).tolist(),
                }
                for label in self.rows
            },
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "BehaviorTable":
        t = cls()
        for label, m in doc["methods"].items():
            t.rows[label] = np.asarray(m["per_seed"], dtype=np.float64).reshape(-1, N_COLORS + 1)
            t.seeds[label] = [int(s) for s in m["seeds"]]
        return t

    def __eq__(self, other):
        if not isinstance(other, BehaviorTable) or self.labels != other.labels:
            return False
        return all(np.array_equal(self.rows[k], other.rows[k]) and self.seeds[k] == other.seeds[k]
                   for k in self.rows)

    def format(self) -> str:
        head = f"{'method':<28}" + "".join(f"{b:>14}" for b in BEHAVIORS)
        lines = [head]
        for label in self.rows:
            m, s = self.mean(label), self.stderr(label)
            lines.append(f"{label:<28}" + "".join(f"{100 * a:8.1f}±{100 * e:4.1f}" for a, e in zip(m, s)))
        return "\n".join(lines)


# experiment specs ---------------------------------------------------------------

def canonical_hash(spec: Mapping) -> str:
    blob = json.dumps(spec, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class ExperimentSpec:
    experiment: str
    methods: list[str]
    layout_spec: str = "random"
    n_episodes: int = 40
    horizon: int = HORIZON
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    guidance: dict = field(default_factory=dict)
    guidance_cfg: dict = field(default_factory=dict)
    rank: dict = field(default_factory=dict)
    cfg_w: float = 1.0
    itps_s: float = 1.0
    models: dict = field(default_factory=dict)
    data: str | None = None
    retention: list[float] = field(default_factory=lambda: [0.01])
    train: dict = field(default_factory=dict)
    grid: dict = field(default_factory=lambda: {"s": [0.5, 1, 1.5, 2, 3], "sigma": [10, 30, 40]})
    raw: dict = field(default_factory=dict, repr=False)
    base_dir: Path = field(default=Path("."), repr=False)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
        if self.layout_spec not in LAYOUT_SPECS:
            raise ConfigError(f"unknown layout spec {self.layout_spec!r}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.n_episodes < 1:
            raise ConfigError("n_episodes must be >= 1")
        src = self.guidance.get("source", "dataset")
        if src not in GOAL_SOURCES:
            raise ConfigError(f"guidance source must be one of {GOAL_SOURCES}, got {src!r}")

    @classmethod
    def from_json(cls, doc: Mapping, base_dir=None) -> "ExperimentSpec":
        if doc.get("format") != EXP_FORMAT:
            raise ConfigError(f"experiment config must carry \"format\": \"{EXP_FORMAT}\"")
        known = {f for f in cls.__dataclass_fields__ if f not in ("raw", "base_dir")}
        extra = set(doc) - known - {"format", "name", "description"}
        if extra:
            raise ConfigError(f"unknown experiment config keys: {sorted(extra)}")
        kw = {k: copy.deepcopy(v) for k, v in doc.items() if k in known}
        if "experiment" not in kw or "methods" not in kw:
            raise ConfigError("experiment config needs 'experiment' and 'methods'")
        return cls(**kw, raw=copy.deepcopy(dict(doc)), base_dir=Path(base_dir or "."))

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        path = Path(path)
        return cls.from_json(json.loads(path.read_text()), path.parent)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def method_config(self, name: str, **guidance_overrides) -> MethodConfig:
        g = dict(self.guidance_cfg, **guidance_overrides)
        return MethodConfig(name, GuidanceConfig(**g), RankConfig(**self.rank), self.cfg_w, self.itps_s)

    def check_files(self):
        missing = [str(self.resolve(p)) for p in self.models.values() if p and not self.resolve(p).exists()]
        if self.data and not self.resolve(self.data).exists():
            missing.append(str(self.resolve(self.data)))
        if self.guidance.get("file") and not self.resolve(self.guidance["file"]).exists():
            missing.append(str(self.resolve(self.guidance["file"])))
        if missing:
            raise ConfigError(f"missing files: {missing}")

    def echo(self) -> dict:
        return copy.deepcopy(self.raw) if self.raw else {"experiment": self.experiment, "methods": self.methods}


# guidance sets -----------------------------------------------------------------------

def dataset_guidance(dataset: Dataset, positive: Sequence = (), negative: Sequence = (),
                     n_conditions: int = 20) -> GuidanceSet:
    """Terminal observations of demos touching the given colors.

    The ``n_conditions`` budget is split evenly over the listed colors of
    each side, taking each color's demos in dataset order.
    """
    def side(colors):
        colors = [color_index(c) for c in colors]
        if not colors:
            return None
        per = max(1, n_conditions // len(colors))
        out = []
        for c in colors:
            demos = dataset.by_color(c)
            if not demos:
                raise ConfigError(f"dataset has no demos of color {COLOR_NAMES[c]}")
            out.extend(tr.terminal_observation for tr in demos[:per])
        return np.stack(out)
    return GuidanceSet(side(positive), side(negative), tuple(positive), tuple(negative))


def episode_goals(states: Sequence[EnvState], color, source: str, seed: int, n_goals: int = 1) -> np.ndarray:
    """Per-episode goal observations (n_episodes, n_goals, 26)."""
    root = Rng(seed).split(0x60A1)
    make = in_distribution_goal if source == "in_distribution" else underspecified_goal
    out = np.empty((len(states), n_goals, OBS_DIM))
    for i, s in enumerate(states):
        r = root.split(i + 1)
        for j in range(n_goals):
            out[i, j] = make(r, s, color)
    return out


# running experiments ---------------------------------------------------------------------

@dataclass
class RunOutput:
    table: BehaviorTable
    episodes: dict[str, list[EpisodeResult]] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def evaluate(methods: Mapping[str, MethodConfig], models: Models | Mapping[str, Models], seeds: Sequence[int],
             n_episodes: int, gset: GuidanceSet | None = None, layout_spec: str = "random",
             horizon: int = HORIZON, goal_source: str | None = None, goal_color=None, n_goals: int = 1,
             out: RunOutput | None = None, trace: bool = False) -> RunOutput:
    """Run each labelled method on the same episodes of every seed.

    ``models`` may map labels to their own model bundle. With a per-episode
    ``goal_source`` ("in_distribution"/"underspecified") the goals are built
    from each episode's initial state and replace ``gset``'s positives.
    """
    out = out or RunOutput(BehaviorTable())
    for seed in seeds:
        states = episode_states(seed, n_episodes, layout_spec)
        seed_gset = gset
        if goal_source in ("in_distribution", "underspecified"):
            g = episode_goals(states, goal_color, goal_source, seed, n_goals)
            seed_gset = GuidanceSet(g, None, (color_index(goal_color),))
        for label, method in methods.items():
            bundle = models[label] if isinstance(models, Mapping) else models
            try:
                ep_goals = _pick_goals(seed_gset, n_episodes, seed) if method.name == "goal" else None
                traces = {} if trace and method.name == "dynaguide" else None
                fn = make_chunk_fn(method, bundle, seed_gset, ep_goals, traces)
                policy = bundle.goal_policy if method.name in ("goal", "cfg") else bundle.policy
                res = run_episodes(fn, states, rollout_rng(seed), policy.execute_len, horizon, seed, traces)
            except ConfigError:
                raise
            except Exception as exc:  # keep going; the failure is reported
                log.exception("run %s seed %d failed", label, seed)
                out.failures.append(f"{label} seed {seed}: {type(exc).__name__}: {exc}")
                continue
            out.table.add(label, seed, frequencies(res))
            out.episodes.setdefault(label, []).extend(res)
    return out


def _pick_goals(gset: GuidanceSet | None, n: int, seed: int) -> np.ndarray:
    """One goal per episode, drawn uniformly from the positives."""
    if gset is None or gset.n_positive == 0:
        raise ConfigError("goal rollout needs positive goal observations")
    rng = Rng(seed).split(0x90A1)
    pos = gset.positives
    if pos.ndim == 3:
        pick = rng.integers(pos.shape[1], size=(n,))
        return pos[np.arange(n), pick]
    return pos[rng.integers(pos.shape[0], size=(n,))]


def load_models(spec: ExperimentSpec, keys=("policy", "dynamics", "goal_policy")) -> Models:
    m = Models()
    shared = None
    if spec.models.get("policy") and "policy" in keys:
        m.policy = DiffusionPolicy.load(spec.resolve(spec.models["policy"]))
        shared = m.policy.schedule_
    if spec.models.get("goal_policy") and "goal_policy" in keys:
        m.goal_policy = DiffusionPolicy.load(spec.resolve(spec.models["goal_policy"]), schedule=shared)
        shared = shared or m.goal_policy.schedule_
    if spec.models.get("dynamics") and "dynamics" in keys:
        m.dynamics = DynamicsModel.load(spec.resolve(spec.models["dynamics"]), schedule=shared)
    return m


def spec_guidance(spec: ExperimentSpec, dataset: Dataset | None) -> GuidanceSet | None:
    g = spec.guidance
    src = g.get("source", "dataset")
    pos = [color_index(c) for c in g.get("positive_colors", [])]
    neg = [color_index(c) for c in g.get("negative_colors", [])]
    if src == "file":
        return GuidanceSet.load(spec.resolve(g["file"]))
    if src in ("in_distribution", "underspecified"):
        return None
    if dataset is None:
        if spec.guidance_cfg.get("metric") == "classifier":
            return GuidanceSet.classifier(pos, neg)
        raise ConfigError("dataset guidance needs 'data'")
    return dataset_guidance(dataset, pos, neg, int(g.get("n_conditions", 20)))


def train_policy_on(dataset: Dataset, train: Mapping, seed: int, goal_conditioned: bool = False) -> DiffusionPolicy:
    kw = dict(train.get("policy", {}))
    return DiffusionPolicy(goal_conditioned=goal_conditioned, random_state=seed, **kw).fit(dataset)


def run_experiment(spec: ExperimentSpec, models: Models | None = None, dataset: Dataset | None = None,
                   ablation: DynamicsModel | None = None, policies: Mapping[float, DiffusionPolicy] | None = None,
                   ) -> RunOutput:
    """Execute an experiment spec; models and data not passed in are loaded from its paths."""
    spec.check_files()
    if dataset is None and spec.data:
        dataset = read_dataset(spec.resolve(spec.data))
    if models is None:
        models = load_models(spec)
    gset = spec_guidance(spec, dataset)
    src = spec.guidance.get("source", "dataset")
    goal_color = (spec.guidance.get("positive_colors") or [None])[0]
    common = dict(seeds=spec.seeds, n_episodes=spec.n_episodes, layout_spec=spec.layout_spec,
                  horizon=spec.horizon, n_goals=int(spec.guidance.get("n_goals", 1)))
    if src in ("in_distribution", "underspecified"):
        common.update(goal_source=src, goal_color=goal_color)
    exp = spec.experiment

    if exp in ("steer", "multi_objective", "avoidance"):
        methods = {m: spec.method_config(m) for m in spec.methods}
        return evaluate(methods, models, gset=gset, **common)

    if exp == "noise_ablation":
        if ablation is None:
            path = spec.models.get("dynamics_ablation")
            if not path:
                raise ConfigError("noise_ablation needs models.dynamics_ablation")
            ablation = DynamicsModel.load(spec.resolve(path), schedule=models.policy.schedule_)
        m = spec.method_config("dynaguide")
        bundles = {"dynaguide[aug]": models,
                   "dynaguide[no-aug]": Models(models.policy, ablation, models.goal_policy)}
        methods = {k: m for k in bundles}
        if "base" in spec.methods:
            methods = {"base": spec.method_config("base"), **methods}
            bundles = {"base": models, **bundles}
        return evaluate(methods, bundles, gset=gset, **common)

    if exp == "grid_search":
        methods = {}
        for s in spec.grid.get("s", []):
            for sigma in spec.grid.get("sigma", []):
                methods[f"dynaguide[s={s:g},sigma={sigma:g}]"] = spec.method_config("dynaguide", s=s, sigma=sigma)
        run = evaluate(methods, models, gset=gset, **common)
        target = goal_color if goal_color is not None else None
        if target is not None and run.table.labels:
            best = max(run.table.labels, key=lambda lab: run.table.rate(lab, target))
            run.extra["best"] = {"label": best, "rate": run.table.rate(best, target)}
        return run

    if exp == "underrepresented":
        if goal_color is None:
            raise ConfigError("underrepresented needs one positive color")
        if dataset is None:
            raise ConfigError("underrepresented needs the full dataset ('data')")
        run = RunOutput(BehaviorTable())
        for r in spec.retention:
            pol = (policies or {}).get(r)
            if pol is None:
                path = spec.models.get(f"policy@{r:g}")
                if path:
                    pol = DiffusionPolicy.load(spec.resolve(path), schedule=models.policy.schedule_)
                else:
                    sub = retain(dataset, {goal_color: r}, int(spec.train.get("seed", 0)))
                    pol = train_policy_on(sub, spec.train, int(spec.train.get("seed", 0)))
            bundle = Models(pol, models.dynamics, models.goal_policy)
            methods = {f"{m}@{r:g}": spec.method_config(m) for m in spec.methods}
            evaluate(methods, bundle, gset=gset, out=run, **common)
        return run

    raise ConfigError(f"unhandled experiment {exp!r}")


def retain(dataset: Dataset, retention: Mapping, seed: int = 0) -> Dataset:
    """Keep ``round(n * fraction)`` demos of each listed color (a seeded subset)."""
    keep = []
    rng = Rng(seed).split(0x4E7A)
    for c in range(N_COLORS):
        demos = dataset.by_color(c)
        frac = float(retention.get(c, retention.get(COLOR_NAMES[c], 1.0)))
        n = int(math.floor(len(demos) * frac + 0.5))
        if n < len(demos):
            idx = np.sort(rng.permutation(len(demos))[:n])
            demos = [demos[i] for i in idx]
        keep.extend(demos)
    manifest = dict(dataset.manifest, retention={COLOR_NAMES[color_index(k)]: float(v) for k, v in retention.items()})
    return Dataset(keep, manifest)


# reports -----------------------------------------------------------------------------

def emit_report(run: RunOutput | BehaviorTable, out_dir, spec: ExperimentSpec | Mapping | None = None) -> dict[str, Path]:
    """Write results.csv, results.json and plotdata.json under ``out_dir``."""
    table = run.table if isinstance(run, RunOutput) else run
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {name: out_dir / name for name in ("results.csv", "results.json", "plotdata.json")}
        with open(paths["results.csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "behavior", "mean", "stderr"])
            for label in table.labels:
                m, s = table.mean(label), table.stderr(label)
                for j, b in enumerate(BEHAVIORS):
                    w.writerow([label, b, repr(float(m[j])), repr(float(s[j]))])
        echo = spec.echo() if isinstance(spec, ExperimentSpec) else dict(spec or {})
        doc = {
            "spec": echo,
            "spec_hash": canonical_hash(echo),
            "results": table.to_json(),
            "failures": list(run.failures) if isinstance(run, RunOutput) else [],
            "extra": dict(run.extra) if isinstance(run, RunOutput) else {},
            "meta": {"written_at": time.strftime("%Y-%m-%dT%H:%M:%S")},
        }
        paths["results.json"].write_text(json.dumps(doc, indent=1, sort_keys=True))
        plot = {
            "x": list(BEHAVIORS),
            "series": [{"label": label, "y": table.mean(label).tolist(), "yerr": table.stderr(label).tolist()}
                       for label in table.labels],
        }
        paths["plotdata.json"].write_text(json.dumps(plot, indent=1))
    except OSError as exc:
        raise OSError(f"cannot write report to {out_dir}: {exc}") from exc
    return paths


def read_report(out_dir) -> tuple[dict, BehaviorTable]:
    doc = json.loads((Path(out_dir) / "results.json").read_text())
    return doc, BehaviorTable.from_json(doc["results"])
