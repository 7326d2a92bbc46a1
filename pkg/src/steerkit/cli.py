"""Command line entry point: ``steerkit <subcommand> [--seed N] [--config FILE] [--out DIR]``.

One JSON config (``"format": "steerkit-exp-v1"``) can hold every stage:
``gen_data``, ``train_policy``, ``train_dynamics`` sections plus the
experiment fields used by ``eval``, ``steer`` and ``grid``. Relative paths
in a config resolve against the config file's directory. The
``STEERKIT_OUT`` environment variable, when set, replaces ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .blockworld import build_dataset, color_index, read_dataset, write_dataset
from .diffusion import DiffusionPolicy, NoiseSchedule
from .dynamics import DynamicsModel
from .harness import (EXP_FORMAT, ConfigError, ExperimentSpec, emit_report, episode_states,
                      load_models, retain, rollout_rng, run_episode, run_experiment, spec_guidance)
from .numerics import Rng

log = logging.getLogger("steerkit")

EXIT_PARTIAL = 3
STAGE_KEYS = ("gen_data", "train_policy", "train_dynamics")


class Config:
    """A parsed config file plus the directory its relative paths hang off."""

    def __init__(self, doc: dict, base: Path):
        if doc.get("format") != EXP_FORMAT:
            raise ConfigError(f"config must carry \"format\": \"{EXP_FORMAT}\"")
        self.doc = doc
        self.base = base

    @classmethod
    def load(cls, path: str | None) -> "Config":
        if path is None:
            return cls({"format": EXP_FORMAT}, Path.cwd())
        p = Path(path)
        try:
            doc = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {p}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        return cls(doc, p.resolve().parent)

    def section(self, key: str) -> dict:
        return dict(self.doc.get(key, {}))

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    def experiment(self) -> ExperimentSpec:
        doc = {k: v for k, v in self.doc.items() if k not in STAGE_KEYS}
        return ExperimentSpec.from_json(doc, self.base)


def out_dir(args, default: str) -> Path:
    d = os.environ.get("STEERKIT_OUT") or args.out or default
    p = Path(d)
    p.mkdir(parents=True, exist_ok=True)
    return p


def write_loss_csv(path: Path, losses):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(losses, 1):
            w.writerow([i, repr(float(v))])


# subcommands ------------------------------------------------------------------

def cmd_gen_data(args, cfg: Config) -> int:
    sec = cfg.section("gen_data")
    seed = args.seed if args.seed is not None else int(sec.get("seed", 0))
    ds = build_dataset(Rng(seed), int(sec.get("n_per_color", 1000)), sec.get("layout_spec", "random"),
                       sec.get("retention"))
    path = write_dataset(ds, out_dir(args, "data"))
    print(f"wrote {len(ds)} demos to {path} ({ds.counts()})")
    return 0


def _load_data(cfg: Config, sec: dict):
    if "data" not in sec:
        raise ConfigError("training section needs a 'data' path")
    ds = read_dataset(cfg.path(sec["data"]))
    if sec.get("retention"):
        ds = retain(ds, sec["retention"], int(sec.get("retention_seed", 0)))
    return ds


def _schedule(cfg: Config, sec: dict) -> NoiseSchedule | None:
    if sec.get("policy"):
        return DiffusionPolicy.load(cfg.path(sec["policy"])).schedule_
    if sec.get("schedule"):
        sc = sec["schedule"]
        return NoiseSchedule(sc.get("K", 100), *sc.get("beta_range", (1e-4, 0.08)), sc.get("ddim_steps", 10))
    return None


def cmd_train_policy(args, cfg: Config) -> int:
    sec = cfg.section("train_policy")
    seed = args.seed if args.seed is not None else int(sec.get("seed", 0))
    ds = _load_data(cfg, sec)
    hyper = {k: sec[k] for k in ("hidden", "chunk_len", "execute_len", "chunk_mode", "p_drop", "epochs",
                                  "batch_size", "lr") if k in sec}
    if "hidden" in hyper:
        hyper["hidden"] = tuple(hyper["hidden"])
    goal = bool(sec.get("goal_conditioned", False))
    pol = DiffusionPolicy(schedule=_schedule(cfg, sec), goal_conditioned=goal, random_state=seed, verbose=1,
                          **hyper).fit(ds)
    name = sec.get("name", "goal_policy" if goal else "policy")
    out = out_dir(args, "models")
    path = pol.save(out / f"{name}.json")
    write_loss_csv(out / f"{name}_loss.csv", pol.loss_curve_)
    print(f"wrote {path} (final loss {pol.loss_curve_[-1]:.5f})")
    return 0


def cmd_train_dynamics(args, cfg: Config) -> int:
    sec = cfg.section("train_dynamics")
    seed = args.seed if args.seed is not None else int(sec.get("seed", 0))
    ds = _load_data(cfg, sec)
    hyper = {k: sec[k] for k in ("hidden", "heads", "p_clean", "mean_step", "chunk_len", "chunk_mode", "epochs",
                                  "batch_size", "lr", "class_weight") if k in sec}
    for k in ("hidden", "heads"):
        if k in hyper:
            hyper[k] = tuple(hyper[k])
    dyn = DynamicsModel(schedule=_schedule(cfg, sec), random_state=seed, verbose=1, **hyper).fit(ds)
    name = sec.get("name", "dynamics")
    out = out_dir(args, "models")
    path = dyn.save(out / f"{name}.json")
    write_loss_csv(out / f"{name}_loss.csv", dyn.loss_curve_)
    print(f"wrote {path} (final loss {dyn.loss_curve_[-1]:.5f})")
    return 0


def _seeded(spec: ExperimentSpec, seed: int | None) -> ExperimentSpec:
    if seed is not None:
        spec.seeds = [seed + i for i in range(len(spec.seeds))]
        spec.raw["seeds"] = spec.seeds
    return spec


def cmd_eval(args, cfg: Config) -> int:
    spec = _seeded(cfg.experiment(), args.seed)
    run = run_experiment(spec)
    paths = emit_report(run, out_dir(args, "results"), spec)
    print(run.table.format())
    for f in run.failures:
        print(f"FAILED {f}", file=sys.stderr)
    print(f"wrote {paths['results.csv']}")
    return EXIT_PARTIAL if run.failures else 0


def cmd_grid(args, cfg: Config) -> int:
    spec = _seeded(cfg.experiment(), args.seed)
    spec.experiment = "grid_search"
    spec.raw["experiment"] = "grid_search"
    run = run_experiment(spec)
    paths = emit_report(run, out_dir(args, "results"), spec)
    print(run.table.format())
    if "best" in run.extra:
        print(f"best cell: {run.extra['best']['label']} ({100 * run.extra['best']['rate']:.1f}%)")
    print(f"wrote {paths['results.csv']}")
    return EXIT_PARTIAL if run.failures else 0


def trend(d: np.ndarray) -> float:
    """Spearman correlation between visit index and metric value."""
    d = np.asarray(d, dtype=np.float64)
    if len(d) < 2 or np.all(d == d[0]):
        return 0.0
    return float(spearmanr(np.arange(len(d)), d).statistic)


def cmd_steer(args, cfg: Config) -> int:
    spec = cfg.experiment()
    if args.target_color is not None or args.avoid_color is not None:
        spec.guidance = dict(spec.guidance, source="dataset" if spec.data else "file",
                             positive_colors=[] if args.target_color is None else [color_index(args.target_color)],
                             negative_colors=[] if args.avoid_color is None else [color_index(args.avoid_color)])
        if not spec.data:
            raise ConfigError("steer needs 'data' in the config to build guidance from colors")
    models = load_models(spec)
    dataset = read_dataset(spec.resolve(spec.data)) if spec.data else None
    gset = spec_guidance(spec, dataset)
    method = spec.method_config("dynaguide")
    seed = args.seed if args.seed is not None else spec.seeds[0]
    states = episode_states(seed, args.episodes, spec.layout_spec)
    rng = rollout_rng(seed)
    lines, positive = [], 0
    for i, state in enumerate(states):
        res = run_episode(method, models, state, gset, rng, horizon=spec.horizon, trace=True)
        rho = trend(res.d_trace[0]) if res.d_trace else 0.0
        positive += rho > 0
        print(f"episode {i}: behavior={res.behavior_name} steps={res.steps} trend={rho:+.3f}")
        for j, d in enumerate(res.d_trace):
            print(f"  chunk {j}: d = " + " ".join(f"{v:.4f}" for v in d))
        lines.append({"episode": i, "behavior": res.behavior_name, "steps": res.steps, "trend": rho,
                      "d_trace": [list(map(float, d)) for d in res.d_trace]})
    frac = positive / max(1, len(states))
    print(f"positive d trend in {positive}/{len(states)} episodes ({100 * frac:.0f}%)")
    out = out_dir(args, "results")
    (out / "steer_trace.json").write_text(json.dumps({"seed": seed, "episodes": lines, "positive_trend": frac}))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-policy": cmd_train_policy,
    "train-dynamics": cmd_train_dynamics,
    "eval": cmd_eval,
    "steer": cmd_steer,
    "grid": cmd_grid,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="steerkit", description="Dynamics-guided steering of diffusion policies.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", default=None, help="steerkit-exp-v1 JSON config")
        p.add_argument("--out", default=None, help="output directory (STEERKIT_OUT overrides)")
        if name == "steer":
            p.add_argument("--target-color", default=None)
            p.add_argument("--avoid-color", default=None)
            p.add_argument("--episodes", type=int, default=1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = Config.load(args.config)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"steerkit {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
