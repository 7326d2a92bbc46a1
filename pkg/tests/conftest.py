"""Shared fixtures.

The ``pipeline`` fixture builds the full model set once per session through
the CLI, exactly as a user would: gen-data, train-policy, train-dynamics,
then the extra models the experiments need. Set STEERKIT_TEST_WORKDIR to a
directory to keep the artifacts between sessions; stages whose outputs
already exist there are skipped and their recorded timings reused.
"""
from __future__ import annotations

import json
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest
from helpers import CRITERIA

from steerkit.blockworld import build_dataset, read_dataset
from steerkit.cli import main
from steerkit.diffusion import DiffusionPolicy, NoiseSchedule
from steerkit.dynamics import DynamicsModel
from steerkit.harness import Models
from steerkit.numerics import Rng

REPO = Path(__file__).resolve().parent.parent
CONFIGS = REPO / "configs"
DATA_SEED = 5

# (stage, subcommand, config, --out, produced file)
STAGES = [
    ("gen_data", "gen-data", "pipeline.json", "data", "data/demos.jsonl"),
    ("train_policy", "train-policy", "pipeline.json", "models", "models/policy.json"),
    ("train_dynamics", "train-dynamics", "pipeline.json", "models", "models/dynamics.json"),
    ("train_goal_policy", "train-policy", "goal_policy.json", "models", "models/goal_policy.json"),
    ("train_dynamics_noaug", "train-dynamics", "dynamics_noaug.json", "models", "models/dynamics_noaug.json"),
    ("train_policy_blue1", "train-policy", "policy_blue1.json", "models", "models/policy@0.01.json"),
]


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])


@dataclass
class Pipeline:
    root: Path
    timings: dict = field(default_factory=dict)

    @property
    def configs(self) -> Path:
        return self.root / "configs"

    @property
    def data_path(self) -> Path:
        return self.root / "data" / "demos.jsonl"

    def model(self, name: str) -> Path:
        return self.root / "models" / f"{name}.json"

    def config(self, name: str) -> Path:
        return self.configs / name

    def load_config(self, name: str) -> dict:
        return json.loads(self.config(name).read_text())

    def write_config(self, name: str, doc: dict) -> Path:
        path = self.config(name)
        path.write_text(json.dumps(doc, indent=1))
        return path


def _run_stage(root: Path, command: str, config: str, out: str) -> None:
    argv = [command, "--config", str(root / "configs" / config), "--out", str(root / out)]
    if command == "gen-data":
        argv += ["--seed", str(DATA_SEED)]
    else:
        argv += ["--seed", "0"]
    code = main(argv)
    assert code == 0, f"steerkit {' '.join(argv)} exited with {code}"


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory) -> Pipeline:
    env = os.environ.get("STEERKIT_TEST_WORKDIR")
    root = Path(env) if env else tmp_path_factory.mktemp("pipeline")
    root.mkdir(parents=True, exist_ok=True)
    shutil.copytree(CONFIGS, root / "configs", dirs_exist_ok=True)
    timing_file = root / "timings.json"
    timings = json.loads(timing_file.read_text()) if timing_file.exists() else {}
    os.environ.pop("STEERKIT_OUT", None)
    for name, command, config, out, product in STAGES:
        if (root / product).exists() and name in timings:
            continue
        t0 = time.perf_counter()
        _run_stage(root, command, config, out)
        timings[name] = time.perf_counter() - t0
        timing_file.write_text(json.dumps(timings, indent=1))
    return Pipeline(root, timings)


@pytest.fixture(scope="session")
def dataset(pipeline):
    return read_dataset(pipeline.data_path)


@pytest.fixture(scope="session")
def models(pipeline) -> Models:
    policy = DiffusionPolicy.load(pipeline.model("policy"))
    sched = policy.schedule_
    return Models(policy, DynamicsModel.load(pipeline.model("dynamics"), schedule=sched),
                  DiffusionPolicy.load(pipeline.model("goal_policy"), schedule=sched))


@pytest.fixture(scope="session")
def held_out():
    """Demos the trained models never saw."""
    return build_dataset(Rng(DATA_SEED + 1000), 50)


# fast fixtures for unit tests --------------------------------------------------------

@pytest.fixture(scope="session")
def tiny_dataset():
    return build_dataset(Rng(0), 12)


@pytest.fixture(scope="session")
def tiny_schedule():
    return NoiseSchedule()


@pytest.fixture(scope="session")
def tiny_policy(tiny_dataset, tiny_schedule):
    return DiffusionPolicy(hidden=(32, 32), schedule=tiny_schedule, epochs=2, random_state=1).fit(tiny_dataset)


@pytest.fixture(scope="session")
def tiny_goal_policy(tiny_dataset, tiny_schedule):
    return DiffusionPolicy(hidden=(32, 32), schedule=tiny_schedule, goal_conditioned=True, epochs=2,
                           random_state=2).fit(tiny_dataset)


@pytest.fixture(scope="session")
def tiny_dynamics(tiny_dataset, tiny_schedule):
    return DynamicsModel(hidden=(24, 24), schedule=tiny_schedule, epochs=2, random_state=3).fit(tiny_dataset)


@pytest.fixture
def rng():
    return Rng(1234)
