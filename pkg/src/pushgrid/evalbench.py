"""Evaluation protocol: scenario suites, outcome classification, reports,
trajectory export and replay."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from pushgrid import scene
from pushgrid.dynamics import SceneState
from pushgrid.env import KIND_NAMES, PushEnv, VecPushEnv, compute_reward, derive_seed
from pushgrid.errors import InvalidInputError
from pushgrid.nn import core
from pushgrid.nn.policy import ActorCritic, ObsBatch, RecurrentState
from pushgrid.ppo import load_policy
from pushgrid.scenarios import EVAL_SUITE, ScenarioSpec, dynamic_obstacle_update, resolve_scenario
from pushgrid.scene import Pose2D, Workspace

__all__ = [
    "EpisodeOutcome", "ScenarioMetrics", "MetricsReport", "ScenarioSpec", "dynamic_obstacle_update",
    "evaluation_scenario", "run_episode", "run_suite", "export_trajectory", "load_trajectory", "replay",
    "ReplayResult", "wilson_interval", "OUTCOME_KINDS", "EVAL_MAX_STEPS",
]

EVAL_MAX_STEPS = 200
OUTCOME_KINDS = ("success", "collision", "timeout", "boundary")
POLICY_STREAM = 7


def evaluation_scenario(scenario) -> ScenarioSpec:
    """The evaluation variant: 200-step limit, episode ends on first obstacle contact."""
    return resolve_scenario(scenario).for_evaluation(EVAL_MAX_STEPS)


@dataclass
class EpisodeOutcome:
    kind: str
    steps: int
    final_pos_error: float
    final_ang_error: float
    scenario: str = ""
    seed: int = 0
    initial_state: Optional[SceneState] = None
    trajectory: Optional[list] = None
    spec: Optional[ScenarioSpec] = None

    def __post_init__(self):
        if self.kind not in OUTCOME_KINDS:
            raise InvalidInputError(f"unknown outcome kind {self.kind!r}")


def _as_model(policy) -> ActorCritic:
    if isinstance(policy, ActorCritic):
        return policy
    return load_policy(policy)


def _choose(dist: core.CategoricalPair, deterministic: bool, rng: np.random.Generator) -> np.ndarray:
    return core.mode(dist) if deterministic else core.sample_bins(dist, rng)


@torch.no_grad()
def run_episode(policy, scenario, seed: int, deterministic: bool = True, record: bool = True,
                workspace: Workspace = Workspace(), action_source=None) -> EpisodeOutcome:
    """Run one evaluation episode.

    ``policy`` is an :class:`ActorCritic` or a checkpoint path.  Passing
    ``action_source`` (a callable ``obs -> (bin_x, bin_y)``) drives the episode
    with scripted actions instead.
    """
    spec = evaluation_scenario(scenario)
    env = PushEnv(spec, workspace, record=record)
    env.reset(seed)
    model = None if action_source is not None else _as_model(policy)
    rng = np.random.default_rng(derive_seed(seed, POLICY_STREAM))
    state = RecurrentState.zeros(1)
    res = None
    while not env.done:
        if model is None:
            action = action_source(env.observation())
        else:
            obs = env.vec_observation()
            dist, _, state = model.step(ObsBatch.from_vec(obs), state)
            action = _choose(dist, deterministic, rng)[0]
        res = env.step(tuple(int(a) for a in action))
    info = res.info
    return EpisodeOutcome(
        kind=info["termination"], steps=int(env.state.step_count),
        final_pos_error=info["position_error"], final_ang_error=info["angle_error"],
        scenario=spec.name, seed=int(seed), initial_state=env.initial_state,
        trajectory=list(env.trajectory) if record else None, spec=spec,
    )


# -- reporting --------------------------------------------------------------------


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = successes / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass
class ScenarioMetrics:
    scenario: str
    episodes: int
    counts: dict
    mean_steps_to_success: Optional[float]

    def rate(self, kind: str) -> float:
        return 100.0 * self.counts[kind] / self.episodes if self.episodes else 0.0

    def half_width(self, kind: str) -> float:
        lo, hi = wilson_interval(self.counts[kind], self.episodes)
        return 100.0 * (hi - lo) / 2.0

    @classmethod
    def from_outcomes(cls, name: str, outcomes: Sequence[EpisodeOutcome]) -> ScenarioMetrics:
        counts = {k: 0 for k in OUTCOME_KINDS}
        for o in outcomes:
            counts[o.kind] += 1
        steps = [o.steps for o in outcomes if o.kind == "success"]
        return cls(name, len(outcomes), counts, float(np.mean(steps)) if steps else None)


CSV_COLUMNS = (
    "scenario", "episodes", "success_rate", "collision_rate", "timeout_rate", "boundary_rate",
    "success_ci95", "collision_ci95", "timeout_ci95", "boundary_ci95", "mean_steps_to_success",
)


@dataclass
class MetricsReport:
    rows: list[ScenarioMetrics]
    outcomes: dict = field(default_factory=dict)  # scenario name -> list[EpisodeOutcome]

    def row(self, name: str) -> ScenarioMetrics:
        for r in self.rows:
            if r.scenario == name:
                return r
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([
                r.scenario, r.episodes,
                *(f"{r.rate(k):.4f}" for k in OUTCOME_KINDS),
                *(f"{r.half_width(k):.4f}" for k in OUTCOME_KINDS),
                "" if r.mean_steps_to_success is None else f"{r.mean_steps_to_success:.4f}",
            ])
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path

    def format_table(self) -> str:
        head = f"{'scenario':<10} {'n':>6} {'success %':>16} {'collision %':>16} {'timeout %':>10} {'boundary %':>10} {'steps':>7}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            steps = "-" if r.mean_steps_to_success is None else f"{r.mean_steps_to_success:.1f}"
            lines.append(
                f"{r.scenario:<10} {r.episodes:>6} "
                f"{r.rate('success'):>7.1f} +-{r.half_width('success'):>5.1f} "
                f"{r.rate('collision'):>7.1f} +-{r.half_width('collision'):>5.1f} "
                f"{r.rate('timeout'):>10.1f} {r.rate('boundary'):>10.1f} {steps:>7}"
            )
        return "\n".join(lines)


@torch.no_grad()
def _run_scenario(model: ActorCritic, spec: ScenarioSpec, seeds: Sequence[int], deterministic: bool,
                  batch: int, workspace: Workspace) -> list[EpisodeOutcome]:
    outcomes: list[EpisodeOutcome] = []
    for start in range(0, len(seeds), batch):
        wave = [int(s) for s in seeds[start:start + batch]]
        env = VecPushEnv(spec, len(wave), workspace=workspace, auto_reset=False)
        obs = env.reset(wave)
        state = RecurrentState.zeros(len(wave))
        rngs = [np.random.default_rng(derive_seed(s, POLICY_STREAM)) for s in wave]
        result: list[Optional[EpisodeOutcome]] = [None] * len(wave)
        while not env.done.all():
            dist, _, state = model.step(ObsBatch.from_vec(obs), state)
            if deterministic:
                actions = core.mode(dist)
            else:
                actions = np.stack([core.sample_bins(core.CategoricalPair(dist.logits[i]), rngs[i])
                                    for i in range(len(wave))])
            res = env.step(actions)
            obs = res.observation
            for i in np.flatnonzero(res.done):
                result[i] = EpisodeOutcome(
                    KIND_NAMES[int(res.kind[i])], int(env.step_count[i]), float(res.pos_error[i]),
                    float(res.ang_error[i]), spec.name, wave[i],
                )
        outcomes.extend(result)
    return outcomes


def run_suite(policy, scenarios: Sequence = EVAL_SUITE, episodes: int = 2000, seed: int = 0,
              deterministic: bool = True, batch: int = 64, workspace: Workspace = Workspace()) -> MetricsReport:
    """Evaluate ``policy`` on each scenario with independently seeded episodes.

    Episode i of scenario k uses seed ``derive_seed(seed, k, i)``.
    """
    if not scenarios:
        raise InvalidInputError("scenario list is empty")
    model = _as_model(policy)
    rows, outcomes = [], {}
    for k, sc in enumerate(scenarios):
        spec = evaluation_scenario(sc)
        seeds = [derive_seed(seed, k, i) for i in range(episodes)]
        outs = _run_scenario(model, spec, seeds, deterministic, batch, workspace)
        rows.append(ScenarioMetrics.from_outcomes(spec.name, outs))
        outcomes[spec.name] = outs
    return MetricsReport(rows, outcomes)


# -- trajectories -----------------------------------------------------------------


TRAJECTORY_COLUMNS = ("step", "pusher_x", "pusher_y", "object_x", "object_y", "object_theta", "reward", "collision")


def export_trajectory(outcome: EpisodeOutcome, path, fmt: Optional[str] = None,
                      workspace: Workspace = Workspace()) -> Path:
    """Write a recorded episode as CSV (for plotting) or NDJSON (replayable).

    Floats are written with ``repr`` so identical outcomes give identical bytes.
    """
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if outcome.trajectory is None or (fmt != "csv" and outcome.initial_state is None):
        raise InvalidInputError("outcome has no recorded trajectory")
    if fmt == "csv":
        lines = [",".join(TRAJECTORY_COLUMNS)]
        for rec in outcome.trajectory:
            vals = [rec["step"], *rec["pusher"], *rec["object"], rec["reward"], int(rec["collision"])]
            lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in vals))
        path.write_text("\n".join(lines) + "\n")
    elif fmt in ("ndjson", "jsonl"):
        header = {
            "type": "header",
            "scenario": (outcome.spec or evaluation_scenario(outcome.scenario)).to_dict(),
            "seed": outcome.seed,
            "workspace": workspace.to_dict(),
            "initial_state": outcome.initial_state.to_dict() if outcome.initial_state is not None else None,
            "outcome": {"kind": outcome.kind, "steps": outcome.steps},
        }
        lines = [json.dumps(header)]
        lines += [json.dumps({"type": "step", **rec}) for rec in outcome.trajectory]
        path.write_text("\n".join(lines) + "\n")
    else:
        raise InvalidInputError(f"unsupported trajectory format {fmt!r}; use csv or ndjson")
    return path


def load_trajectory(path) -> tuple[dict, list[dict]]:
    """Parse an NDJSON trajectory; raises InvalidInputError on malformed files."""
    try:
        text = Path(path).read_text()
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot parse trajectory {path}: {exc}") from exc
    if not records or records[0].get("type") != "header" or records[0].get("initial_state") is None:
        raise InvalidInputError(f"{path}: missing trajectory header")
    steps = records[1:]
    for i, rec in enumerate(steps, start=1):
        if rec.get("type") != "step" or rec.get("step") != i or "action" not in rec:
            raise InvalidInputError(f"{path}: malformed step record {i}")
    if not steps:
        raise InvalidInputError(f"{path}: trajectory has no steps")
    if not steps[-1].get("done"):
        raise InvalidInputError(f"{path}: trajectory is truncated (last step is not terminal)")
    return records[0], steps


@dataclass
class ReplayResult:
    max_pose_divergence: float  # meters, over pusher and object positions
    max_angle_divergence: float
    max_reward_divergence: float
    steps: int
    outcome: str
    env: PushEnv


def replay(path, workspace: Optional[Workspace] = None) -> ReplayResult:
    """Re-simulate an NDJSON trajectory from its initial state and actions."""
    header, steps = load_trajectory(path)
    try:
        spec = ScenarioSpec.from_dict(header["scenario"])
        ws = workspace or Workspace.from_dict(header["workspace"])
        init = SceneState.from_dict(header["initial_state"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"{path}: bad header: {exc}") from exc
    env = PushEnv(spec, ws, record=True)
    env.load_state(init, int(header.get("seed", 0)))
    dpos = dang = drew = 0.0
    for rec in steps:
        res = env.step(tuple(rec["action"]))
        st = env.state
        dpos = max(dpos, math.hypot(st.pusher_pose.x - rec["pusher"][0], st.pusher_pose.y - rec["pusher"][1]),
                   math.hypot(st.object_pose.x - rec["object"][0], st.object_pose.y - rec["object"][1]))
        dang = max(dang, abs(scene.wrap_angle(st.object_pose.theta - rec["object"][2])))
        drew = max(drew, abs(res.reward - rec["reward"]))
        if res.done:
            break
    return ReplayResult(dpos, dang, drew, len(env.trajectory), env.trajectory[-1]["termination"], env)


def recomputed_rewards(header: dict, steps: list[dict]) -> list[float]:
    """Rewards recomputed from the logged poses alone, without re-simulating."""
    init = SceneState.from_dict(header["initial_state"])
    ws = Workspace.from_dict(header["workspace"])
    out = []
    for rec in steps:
        obstacles = tuple(
            type(o)(o.shape, Pose2D(*pose), o.velocity) for o, pose in zip(init.obstacles, rec["obstacles"])
        )
        st = SceneState(
            Pose2D(rec["pusher"][0], rec["pusher"][1], 0.0), Pose2D(*rec["object"]), init.target_pose,
            init.pusher_shape, init.object_shape, init.params, obstacles, rec["step"],
        )
        out.append(compute_reward(st, rec["termination"], rec["collision"], ws))
    return out
