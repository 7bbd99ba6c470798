"""Scenario definitions shared by the environment and the evaluation suite."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import yaml

from pushgrid import scene
from pushgrid.dynamics import Obstacle
from pushgrid.errors import InvalidInputError
from pushgrid.scene import Pose2D, ShapeSpec, Workspace

OBJECT_SIZE = (0.08, 0.06)
PUSHER_RADIUS = 0.01

SHAPE_KINDS = ("rectangle", "circle", "cross", "t_shape", "l_shape")


def obstacle_shape(kind: str, scale: float = 1.0) -> ShapeSpec:
    """Unscaled library shape of the given kind, with ``scale`` applied."""
    if kind == "rectangle":
        return scene.rectangle(0.12, 0.04, scale=scale, name="rectangle")
    if kind == "circle":
        return scene.circle(0.04, scale=scale, name="circle")
    if kind == "cross":
        return scene.cross_shape(scale=scale)
    if kind == "t_shape":
        return scene.t_shape(scale=scale)
    if kind == "l_shape":
        return scene.l_shape(scale=scale)
    raise InvalidInputError(f"unknown obstacle kind {kind!r}; known: {', '.join(SHAPE_KINDS)}")


def object_shape(scale: float = 1.0) -> ShapeSpec:
    return scene.rectangle(*OBJECT_SIZE, scale=scale, name="object")


def pusher_shape(scale: float = 1.0) -> ShapeSpec:
    return scene.circle(PUSHER_RADIUS, scale=scale, name="pusher")


@dataclass(frozen=True)
class ObstacleGroup:
    kind: str
    count: int = 1
    scale_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        obstacle_shape(self.kind)
        if self.count < 0:
            raise InvalidInputError("obstacle count must be non-negative")
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    obstacles: tuple[ObstacleGroup, ...] = ()
    dynamic: bool = False
    obstacle_speed: float = 0.1
    max_steps: int = 160
    randomize: bool = True
    noise: bool = True
    terminate_on_collision: bool = False
    position_tolerance: float = 0.015
    orientation_tolerance: Optional[float] = math.pi / 6
    corridor_half_width: float = 0.1
    object_scale_range: tuple[float, float] = (0.9, 1.1)
    pusher_scale_range: tuple[float, float] = (0.95, 1.05)

    def __post_init__(self):
        groups = tuple(g if isinstance(g, ObstacleGroup) else ObstacleGroup(**g) for g in self.obstacles)
        object.__setattr__(self, "obstacles", groups)
        if self.max_steps <= 0:
            raise InvalidInputError("max_steps must be positive")

    @property
    def n_obstacles(self) -> int:
        return sum(g.count for g in self.obstacles)

    def for_evaluation(self, max_steps: int = 200) -> ScenarioSpec:
        return replace(self, max_steps=max_steps, terminate_on_collision=True)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["obstacles"] = [asdict(g) for g in self.obstacles]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown scenario key(s): {', '.join(sorted(unknown))}")
        d = dict(d)
        d["obstacles"] = tuple(ObstacleGroup(**g) for g in d.get("obstacles", ()))
        for key in ("object_scale_range", "pusher_scale_range"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidInputError(str(exc)) from exc


def _single(kind: str) -> tuple[ObstacleGroup, ...]:
    return (ObstacleGroup(kind, 1),)


SCENARIOS: dict[str, ScenarioSpec] = {
    "free": ScenarioSpec("free", orientation_tolerance=None),
    "training": ScenarioSpec("training", _single("rectangle")),
    "circular": ScenarioSpec("circular", _single("circle")),
    "cross": ScenarioSpec("cross", _single("cross")),
    "t_shape": ScenarioSpec("t_shape", _single("t_shape")),
    "l_shape": ScenarioSpec("l_shape", _single("l_shape")),
    "dynamic": ScenarioSpec("dynamic", _single("rectangle"), dynamic=True),
    "dual": ScenarioSpec("dual", (ObstacleGroup("rectangle", 2),)),
}

EVAL_SUITE = ("training", "circular", "cross", "t_shape", "l_shape", "dynamic", "dual")


def get_scenario(name: str) -> ScenarioSpec:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise InvalidInputError(f"unknown scenario {name!r}; known: {', '.join(SCENARIOS)}") from None


def resolve_scenario(value) -> ScenarioSpec:
    """Accept a ScenarioSpec, a registered name, a mapping, or a path to a YAML/JSON file."""
    if isinstance(value, ScenarioSpec):
        return value
    if isinstance(value, dict):
        return ScenarioSpec.from_dict(value)
    if isinstance(value, str) and value in SCENARIOS:
        return SCENARIOS[value]
    path = Path(value)
    if path.is_file():
        return load_scenario(path)
    raise InvalidInputError(f"unknown scenario {value!r}; known: {', '.join(SCENARIOS)}")


def load_scenario(path) -> ScenarioSpec:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise InvalidInputError(f"cannot read scenario file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise InvalidInputError(f"scenario file {path} must contain a mapping")
    return ScenarioSpec.from_dict(doc)


def save_scenario(path, spec: ScenarioSpec) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2))


def dynamic_obstacle_update(obstacle, dt: float, workspace: Workspace = Workspace()):
    """Move an obstacle by its velocity, bouncing off the workspace y-limits.

    On reaching a y-boundary the velocity flips and the overshoot is reflected
    back inside, so the motion is a triangle wave of constant speed.
    """
    vx, vy = obstacle.velocity
    pose = Pose2D(obstacle.pose.x + vx * dt, obstacle.pose.y + vy * dt, obstacle.pose.theta)
    _, y0, _, y1 = scene.footprint_bounds(obstacle.shape, pose)
    _, by0, _, by1 = workspace.bounds
    if y1 >= by1 and vy > 0:
        pose = Pose2D(pose.x, pose.y - 2.0 * (y1 - by1), pose.theta)
        vy = -vy
    elif y0 <= by0 and vy < 0:
        pose = Pose2D(pose.x, pose.y + 2.0 * (by0 - y0), pose.theta)
        vy = -vy
    return Obstacle(obstacle.shape, pose, (vx, vy))
