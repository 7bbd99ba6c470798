"""Pushing-in-clutter environment, single and vectorised.

The vectorised :class:`VecPushEnv` keeps every scene in flat numpy arrays and
steps them together; :class:`PushEnv` is a one-scene view of it with the
usual reset/step protocol.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from pushgrid import dynamics, scene
from pushgrid.dynamics import DynamicsParams, Obstacle, SceneState
from pushgrid.errors import BatchError, InvalidActionError, ProtocolError, ScenarioInfeasibleError
from pushgrid.scenarios import (
    ScenarioSpec,
    dynamic_obstacle_update,
    object_shape,
    obstacle_shape,
    pusher_shape,
    resolve_scenario,
)
from pushgrid.scene import OccupancyGrid, PartArrays, Pose2D, Workspace, wrap_angle

N_BINS = 11
BIN_STEP = 0.02
DT = 0.1
MAX_SAMPLING_ATTEMPTS = 1000

R_SUCCESS = 50.0
R_BOUNDARY = -10.0
R_COLLISION = -5.0
K_DIST = 0.1
K_ANG = 0.02

NONE, SUCCESS, COLLISION, BOUNDARY, TIMEOUT = 0, 1, 2, 3, 4
KIND_NAMES = {SUCCESS: "success", COLLISION: "collision", BOUNDARY: "boundary", TIMEOUT: "timeout"}
KIND_CODES = {v: k for k, v in KIND_NAMES.items()}

STATE_DIM = 8  # object (x, y, theta), target (x, y, theta), pusher (x, y)


# -- actions ------------------------------------------------------------------------


@dataclass(frozen=True)
class Action:
    bin_x: int
    bin_y: int

    def __post_init__(self):
        for b in (self.bin_x, self.bin_y):
            if not (isinstance(b, (int, np.integer)) and 0 <= b < N_BINS):
                raise InvalidActionError(f"action bins must be integers in [0, {N_BINS - 1}], got {b!r}")


def decode_bins(bins) -> np.ndarray:
    """Velocity (m/s) for integer bins, elementwise: -0.1 + 0.02 * bin."""
    bins = np.asarray(bins)
    if not np.issubdtype(bins.dtype, np.integer) or np.any((bins < 0) | (bins >= N_BINS)):
        raise InvalidActionError(f"action bins must be integers in [0, {N_BINS - 1}]")
    return (bins - (N_BINS // 2)) * BIN_STEP


def decode_action(action: Action) -> tuple[float, float]:
    vx, vy = decode_bins(np.array([action.bin_x, action.bin_y]))
    return float(vx), float(vy)


# -- reward ---------------------------------------------------------------------------


def reward_terms(obj_pose: np.ndarray, target: np.ndarray, collision: np.ndarray, kind: np.ndarray,
                 diagonal: float) -> np.ndarray:
    """Batched shaped reward with termination and collision terms."""
    r_dist = np.clip(np.hypot(obj_pose[:, 0] - target[:, 0], obj_pose[:, 1] - target[:, 1]) / diagonal, 0.0, 1.0)
    r_ang = np.abs(wrap_angle(obj_pose[:, 2] - target[:, 2])) / math.pi
    r_term = np.where(kind == SUCCESS, R_SUCCESS, np.where(kind == BOUNDARY, R_BOUNDARY, 0.0))
    r_coll = np.where(collision, R_COLLISION, 0.0)
    return r_term + K_DIST * (1.0 - r_dist) + K_ANG * (1.0 - r_ang) + r_coll


def in_collision(state: SceneState) -> bool:
    pusher = (state.pusher_shape, state.pusher_pose)
    obj = (state.object_shape, state.object_pose)
    return any(
        scene.collide(pusher, (o.shape, o.pose)) or scene.collide(obj, (o.shape, o.pose)) for o in state.obstacles
    )


def compute_reward(
    state_after: SceneState,
    terminal: Optional[str] = None,
    collision: Optional[bool] = None,
    workspace: Workspace = Workspace(),
) -> float:
    """Reward for arriving in ``state_after``.

    ``collision`` defaults to a geometric check of pusher and object against
    every obstacle in the state.
    """
    if collision is None:
        collision = in_collision(state_after)
    kind = KIND_CODES.get(terminal, NONE) if terminal else NONE
    r = reward_terms(
        np.array([state_after.object_pose.as_tuple()]),
        np.array([state_after.target_pose.as_tuple()]),
        np.array([bool(collision)]),
        np.array([kind]),
        workspace.diagonal,
    )
    return float(r[0])


# -- observations ---------------------------------------------------------------------


@dataclass
class NoiseModel:
    pos_sigma: float = 0.001
    ang_sigma: float = 0.02
    enabled: bool = True

    def sigmas(self) -> np.ndarray:
        # object x, y, theta, pusher x, y
        s = self.pos_sigma
        return np.array([s, s, self.ang_sigma, s, s]) if self.enabled else np.zeros(5)


@dataclass
class Observation:
    object_pose: Pose2D
    target_pose: Pose2D
    pusher_pos: tuple[float, float]
    grid: OccupancyGrid

    def state_vector(self) -> np.ndarray:
        return np.array([*self.object_pose.as_tuple(), *self.target_pose.as_tuple(), *self.pusher_pos])


@dataclass
class VecObservation:
    state: np.ndarray  # (B, 8)
    patches: np.ndarray  # (B, n, 256) uint8
    grid_id: np.ndarray  # (B,) int64, changes whenever a scene's grid changes

    def __len__(self):
        return len(self.state)

    def copy(self) -> VecObservation:
        return VecObservation(self.state.copy(), self.patches.copy(), self.grid_id.copy())

    def select(self, idx) -> VecObservation:
        return VecObservation(self.state[idx], self.patches[idx], self.grid_id[idx])


@dataclass
class StepResult:
    observation: Observation
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


@dataclass
class VecStepResult:
    observation: VecObservation  # after auto-reset for finished scenes
    reward: np.ndarray
    done: np.ndarray
    kind: np.ndarray
    collision: np.ndarray
    boundary: np.ndarray
    pos_error: np.ndarray
    ang_error: np.ndarray
    terminal_observation: Optional[VecObservation]  # pre-reset observation, set when any scene finished
    active: np.ndarray


# -- scene sampling -------------------------------------------------------------------


def _uniform_pose(rng: np.random.Generator, workspace: Workspace) -> Pose2D:
    x0, y0, x1, y1 = workspace.bounds
    return Pose2D(rng.uniform(x0, x1), rng.uniform(y0, y1), rng.uniform(-math.pi, math.pi))


def _sample_scale(rng: np.random.Generator, lo_hi, randomize: bool) -> float:
    return float(rng.uniform(*lo_hi)) if randomize else 1.0


def sample_scene(rng: np.random.Generator, scenario: ScenarioSpec, workspace: Workspace = Workspace()) -> SceneState:
    """Rejection-sample an initial scene.

    Every obstacle centroid lies in a corridor of half-width
    ``scenario.corridor_half_width`` around the object->target segment, with
    projection parameter strictly inside (0, 1).  No footprint overlaps any
    other at the start (the object's target footprint included), and all lie
    inside the workspace.
    """
    randomize = scenario.randomize
    obj_shape = object_shape(_sample_scale(rng, scenario.object_scale_range, randomize))
    push_shape = pusher_shape(_sample_scale(rng, scenario.pusher_scale_range, randomize))
    params = dynamics.sample_params(rng, obj_shape, randomize)
    kinds = [g for g in scenario.obstacles for _ in range(g.count)]
    w = scenario.corridor_half_width

    for _ in range(MAX_SAMPLING_ATTEMPTS):
        obj_pose = _uniform_pose(rng, workspace)
        if not scene.in_workspace(obj_shape, obj_pose, workspace):
            continue
        tgt_pose = _uniform_pose(rng, workspace)
        if not scene.in_workspace(obj_shape, tgt_pose, workspace):
            continue
        obj = (obj_shape, obj_pose)
        tgt = (obj_shape, tgt_pose)
        d = tgt_pose.xy - obj_pose.xy
        length = float(np.hypot(*d))
        if kinds and length < 1e-6:
            continue
        perp = np.array([-d[1], d[0]]) / max(length, 1e-12)

        obstacles: list[Obstacle] = []
        for group in kinds:
            shape = obstacle_shape(group.kind, _sample_scale(rng, group.scale_range, randomize))
            placed = None
            for _ in range(20):
                t = rng.uniform(0.0, 1.0)
                if t <= 0.0:
                    continue
                pos = obj_pose.xy + t * d + rng.uniform(-w, w) * perp
                pose = Pose2D(pos[0], pos[1], rng.uniform(-math.pi, math.pi))
                cand = (shape, pose)
                if not scene.in_workspace(shape, pose, workspace):
                    continue
                if scene.collide(cand, obj) or scene.collide(cand, tgt):
                    continue
                if any(scene.collide(cand, (o.shape, o.pose)) for o in obstacles):
                    continue
                placed = pose
                break
            if placed is None:
                break
            vel = (0.0, 0.0)
            if scenario.dynamic:
                vel = (0.0, scenario.obstacle_speed * (1.0 if rng.uniform() < 0.5 else -1.0))
            obstacles.append(Obstacle(shape, placed, vel))
        if len(obstacles) != len(kinds):
            continue

        pusher_pose = None
        for _ in range(50):
            x0, y0, x1, y1 = workspace.bounds
            pose = Pose2D(rng.uniform(x0, x1), rng.uniform(y0, y1), 0.0)
            cand = (push_shape, pose)
            if not scene.in_workspace(push_shape, pose, workspace) or scene.collide(cand, obj):
                continue
            if any(scene.collide(cand, (o.shape, o.pose)) for o in obstacles):
                continue
            pusher_pose = pose
            break
        if pusher_pose is None:
            continue
        return SceneState(pusher_pose, obj_pose, tgt_pose, push_shape, obj_shape, params, tuple(obstacles), 0)
    raise ScenarioInfeasibleError(f"scenario {scenario.name!r}: no valid scene after {MAX_SAMPLING_ATTEMPTS} attempts")


def episode_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (scene, noise) generators for one episode seed."""
    scene_ss, noise_ss = np.random.SeedSequence(int(seed)).spawn(2)
    return np.random.default_rng(scene_ss), np.random.default_rng(noise_ss)


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _parts_capacity(scenario: ScenarioSpec) -> tuple[int, int, int]:
    polys = circles = 0
    verts = 4
    for g in scenario.obstacles:
        shape = obstacle_shape(g.kind)
        parts = shape.convex_parts()
        n_circ = sum(1 for k, _ in parts if k == "circle")
        polys += g.count * (len(parts) - n_circ)
        circles += g.count * n_circ
        verts = max(verts, shape.max_vertices)
    return max(polys, 1), max(circles, 1), verts


# -- vectorised environment -------------------------------------------------------------


class VecPushEnv:
    """A batch of independent pushing scenes stepped together.

    With ``auto_reset`` a finished scene is immediately re-sampled from a
    fresh seed ``derive_seed(seed, env_index, episode_index)``; otherwise it is
    frozen until reset explicitly and further actions for it are ignored.
    """

    def __init__(
        self,
        scenario="training",
        num_envs: int = 1,
        seed: int = 0,
        workspace: Workspace = Workspace(),
        auto_reset: bool = True,
        noise: Optional[NoiseModel] = None,
    ):
        self.scenario = resolve_scenario(scenario)
        self.num_envs = int(num_envs)
        self.seed = int(seed)
        self.workspace = workspace
        self.auto_reset = auto_reset
        self.noise = noise if noise is not None else NoiseModel(enabled=self.scenario.noise)
        self.grid_shape = workspace.grid_shape(scene.RESOLUTION)
        self.patch_origins = scene.patch_origins(workspace, scene.RESOLUTION, self.grid_shape)

        B = self.num_envs
        n_patches = len(self.patch_origins)
        P, C, K = _parts_capacity(self.scenario)
        self.pusher_xy = np.zeros((B, 2))
        self.pusher_r = np.ones(B)
        self.obj_pose = np.zeros((B, 3))
        self.obj_verts = np.zeros((B, 4, 2))
        self.target = np.zeros((B, 3))
        self.mu = np.ones(B)
        self.ls_c = np.ones(B)
        self.step_count = np.zeros(B, dtype=np.int64)
        self.done = np.zeros(B, dtype=bool)
        self.parts = PartArrays(
            np.zeros((B, P, K, 2)), np.zeros((B, P), bool), np.full((B, P), -1),
            np.tile([0.0, 0.0, 1.0], (B, C, 1)), np.zeros((B, C), bool), np.full((B, C), -1),
        )
        self.patches = np.zeros((B, n_patches, scene.PATCH_SIZE ** 2), dtype=np.uint8)
        self.grid_id = np.zeros(B, dtype=np.int64)
        self.grids: list[Optional[OccupancyGrid]] = [None] * B
        self.noise_corr = np.zeros((B, 5))
        self.noise_step = np.zeros((B, self.scenario.max_steps + 1, 5))
        self.episode_index = np.zeros(B, dtype=np.int64)
        self.episode_seeds = np.zeros(B, dtype=np.int64)
        self._states: list[Optional[SceneState]] = [None] * B
        self._next_grid_id = 0
        self._was_reset = False

    # state management

    def reset(self, seeds: Optional[Sequence[int]] = None) -> VecObservation:
        for i in range(self.num_envs):
            s = seeds[i] if seeds is not None else derive_seed(self.seed, i, self.episode_index[i])
            self.reset_env(i, s)
        self._was_reset = True
        return self.observe()

    def reset_env(self, i: int, seed: int) -> None:
        scene_rng, _ = episode_streams(seed)
        state = sample_scene(scene_rng, self.scenario, self.workspace)
        self.load_state(i, state, seed)

    def load_state(self, i: int, state: SceneState, seed: int = 0) -> None:
        """Put scene ``i`` into ``state``; observation noise is drawn from ``seed``."""
        _, noise_rng = episode_streams(seed)
        sig = self.noise.sigmas()
        corr = noise_rng.normal(size=5) * sig
        per_step = noise_rng.normal(size=(self.scenario.max_steps + 1, 5)) * sig
        self.noise_corr[i] = corr
        self.noise_step[i] = per_step
        self.episode_seeds[i] = seed
        self.pusher_xy[i] = state.pusher_pose.xy
        self.pusher_r[i] = state.pusher_shape.radius * state.pusher_shape.scale
        self.obj_pose[i] = state.object_pose.as_tuple()
        self.obj_verts[i] = dynamics._polygon_verts(state.object_shape)
        self.target[i] = state.target_pose.as_tuple()
        self.mu[i] = state.params.static_friction
        self.ls_c[i] = state.params.limit_surface_c
        self.step_count[i] = state.step_count
        self.done[i] = False
        self._states[i] = state
        self._set_obstacles(i, state.obstacles)
        self._was_reset = True

    def _set_obstacles(self, i: int, obstacles: Sequence[Obstacle]) -> None:
        pairs = [(o.shape, o.pose) for o in obstacles]
        one = PartArrays.build([pairs], max_vertices=self.parts.poly.shape[2])
        dst = self.parts
        n_poly, n_circ = one.poly.shape[1], one.circ.shape[1]
        if n_poly > dst.poly.shape[1] or n_circ > dst.circ.shape[1] or one.poly.shape[2] > dst.poly.shape[2]:
            raise BatchError("scene has more obstacle parts than the scenario allows")
        dst.poly[i] = 0.0
        dst.poly_mask[i] = False
        dst.poly_owner[i] = -1
        dst.circ[i] = (0.0, 0.0, 1.0)
        dst.circ_mask[i] = False
        dst.circ_owner[i] = -1
        dst.poly[i, :n_poly] = one.poly[0]
        dst.poly_mask[i, :n_poly] = one.poly_mask[0]
        dst.poly_owner[i, :n_poly] = one.poly_owner[0]
        dst.circ[i, :n_circ] = one.circ[0]
        dst.circ_mask[i, :n_circ] = one.circ_mask[0]
        dst.circ_owner[i, :n_circ] = one.circ_owner[0]
        grid = scene.rasterize(pairs, self.workspace, scene.RESOLUTION)
        self.grids[i] = grid
        self.patches[i] = scene.patch_array(grid.cells)
        self.grid_id[i] = self._next_grid_id
        self._next_grid_id += 1

    def get_state(self, i: int) -> SceneState:
        base = self._states[i]
        if base is None:
            raise ProtocolError("environment has not been reset")
        return replace(
            base,
            pusher_pose=Pose2D(self.pusher_xy[i, 0], self.pusher_xy[i, 1], 0.0),
            object_pose=Pose2D(*self.obj_pose[i]),
            step_count=int(self.step_count[i]),
        )

    def observe(self) -> VecObservation:
        k = np.minimum(self.step_count, self.scenario.max_steps)
        noise = self.noise_corr + self.noise_step[np.arange(self.num_envs), k]
        state = np.empty((self.num_envs, STATE_DIM))
        state[:, 0:2] = self.obj_pose[:, 0:2] + noise[:, 0:2]
        state[:, 2] = wrap_angle(self.obj_pose[:, 2] + noise[:, 2])
        state[:, 3:6] = self.target
        state[:, 6:8] = self.pusher_xy + noise[:, 3:5]
        if not self.noise.enabled:
            state[:, 0:3] = self.obj_pose
            state[:, 6:8] = self.pusher_xy
        return VecObservation(state, self.patches.copy(), self.grid_id.copy())

    # stepping

    def object_world_vertices(self, idx=slice(None)) -> np.ndarray:
        q = self.obj_pose[idx]
        c, s = np.cos(q[:, 2])[:, None], np.sin(q[:, 2])[:, None]
        v = self.obj_verts[idx]
        return np.stack([c * v[..., 0] - s * v[..., 1] + q[:, None, 0], s * v[..., 0] + c * v[..., 1] + q[:, None, 1]], -1)

    def step(self, actions) -> VecStepResult:
        if not self._was_reset:
            raise ProtocolError("step() called before reset()")
        actions = np.asarray(actions)
        if actions.shape != (self.num_envs, 2):
            raise BatchError(f"expected actions of shape ({self.num_envs}, 2), got {actions.shape}")
        vel = decode_bins(actions)
        B = self.num_envs
        active = ~self.done
        idx = np.flatnonzero(active)
        full = len(idx) == B
        sel = slice(None) if full else idx

        p, q, _ = dynamics.step_batch(
            self.pusher_xy[sel], self.pusher_r[sel], self.obj_pose[sel], self.obj_verts[sel],
            self.mu[sel], self.ls_c[sel], vel[sel], DT,
        )
        self.pusher_xy[sel] = p
        self.obj_pose[sel] = q
        self.step_count[sel] += 1

        if self.scenario.dynamic:
            for i in idx:
                moved = tuple(dynamic_obstacle_update(o, DT, self.workspace) for o in self._states[i].obstacles)
                self._states[i] = replace(self._states[i], obstacles=moved)
                self._set_obstacles(i, moved)

        parts = self.parts if full else PartArrays(*(getattr(self.parts, n)[idx] for n in (
            "poly", "poly_mask", "poly_owner", "circ", "circ_mask", "circ_owner")))
        verts_w = self.object_world_vertices(sel)
        collision = scene.circles_hit_parts(p, self.pusher_r[sel], parts) | scene.polygons_hit_parts(verts_w, parts)
        x0, y0, x1, y1 = self.workspace.bounds
        r = self.pusher_r[sel]
        boundary = (
            np.any(verts_w[..., 0] < x0, axis=1) | np.any(verts_w[..., 0] > x1, axis=1)
            | np.any(verts_w[..., 1] < y0, axis=1) | np.any(verts_w[..., 1] > y1, axis=1)
            | (p[:, 0] - r < x0) | (p[:, 0] + r > x1) | (p[:, 1] - r < y0) | (p[:, 1] + r > y1)
        )
        tgt = self.target[sel]
        pos_err = np.hypot(q[:, 0] - tgt[:, 0], q[:, 1] - tgt[:, 1])
        ang_err = np.abs(wrap_angle(q[:, 2] - tgt[:, 2]))
        success = pos_err < self.scenario.position_tolerance
        if self.scenario.orientation_tolerance is not None:
            success &= ang_err < self.scenario.orientation_tolerance
        timeout = self.step_count[sel] >= self.scenario.max_steps
        kind = np.where(
            collision & self.scenario.terminate_on_collision, COLLISION,
            np.where(boundary, BOUNDARY, np.where(success, SUCCESS, np.where(timeout, TIMEOUT, NONE))),
        )
        reward = reward_terms(q, tgt, collision, kind, self.workspace.diagonal)

        def scatter(values, fill, dtype=None):
            out = np.full(B, fill, dtype=dtype if dtype is not None else np.asarray(values).dtype)
            out[sel] = values
            return out

        kind_all = scatter(kind, NONE, np.int64)
        done_now = kind_all != NONE
        self.done |= done_now
        terminal = None
        if done_now.any():
            terminal = self.observe()
            if self.auto_reset:
                for i in np.flatnonzero(done_now):
                    self.episode_index[i] += 1
                    self.reset_env(i, derive_seed(self.seed, i, self.episode_index[i]))
        return VecStepResult(
            observation=self.observe(),
            reward=scatter(reward, 0.0, float),
            done=done_now,
            kind=kind_all,
            collision=scatter(collision, False, bool),
            boundary=scatter(boundary, False, bool),
            pos_error=scatter(pos_err, np.nan, float),
            ang_error=scatter(ang_err, np.nan, float),
            terminal_observation=terminal,
            active=active,
        )


def _single_observation(env: VecPushEnv, obs: VecObservation, i: int, grid: OccupancyGrid) -> Observation:
    s = obs.state[i]
    return Observation(Pose2D(s[0], s[1], s[2]), Pose2D(s[3], s[4], s[5]), (float(s[6]), float(s[7])), grid)


def vector_step(env: VecPushEnv, actions) -> list[StepResult]:
    """Step every scene and return per-scene results.

    For finished scenes ``observation`` is the first observation of the
    freshly reset episode and ``info["terminal_observation"]`` the last one of
    the finished episode.
    """
    actions = np.asarray(actions)
    if len(actions) != env.num_envs:
        raise BatchError(f"got {len(actions)} actions for {env.num_envs} environments")
    old_grids = list(env.grids)
    res = env.step(actions)
    out = []
    for i in range(env.num_envs):
        info = _info(res, i)
        if res.done[i] and res.terminal_observation is not None:
            info["terminal_observation"] = _single_observation(env, res.terminal_observation, i, old_grids[i])
        out.append(StepResult(_single_observation(env, res.observation, i, env.grids[i]), float(res.reward[i]),
                              bool(res.done[i]), info))
    return out


def _info(res: VecStepResult, i: int) -> dict:
    kind = int(res.kind[i])
    return {
        "collision": bool(res.collision[i]),
        "success": kind == SUCCESS,
        "boundary": kind == BOUNDARY,
        "timeout": kind == TIMEOUT,
        "termination": KIND_NAMES.get(kind),
        "position_error": float(res.pos_error[i]),
        "angle_error": float(res.ang_error[i]),
    }


class PushEnv:
    """Single pushing scene with the reset/step protocol.

    With ``record=True`` every step appends a state record to
    ``self.trajectory`` (see :mod:`pushgrid.evalbench` for the file format).
    """

    def __init__(self, scenario="training", workspace: Workspace = Workspace(), record: bool = False,
                 noise: Optional[NoiseModel] = None):
        self._noise = noise
        self._workspace = workspace
        self._vec = VecPushEnv(scenario, 1, workspace=workspace, auto_reset=False, noise=noise)
        self.record = record
        self.trajectory: list[dict] = []
        self.initial_state: Optional[SceneState] = None
        self.seed: Optional[int] = None
        self._started = False

    @property
    def scenario(self) -> ScenarioSpec:
        return self._vec.scenario

    @property
    def workspace(self) -> Workspace:
        return self._workspace

    @property
    def state(self) -> SceneState:
        return self._vec.get_state(0)

    @property
    def done(self) -> bool:
        return bool(self._vec.done[0])

    def reset(self, seed: int, scenario=None) -> Observation:
        if scenario is not None and resolve_scenario(scenario) != self._vec.scenario:
            self._vec = VecPushEnv(scenario, 1, workspace=self._workspace, auto_reset=False, noise=self._noise)
        self._vec.reset([seed])
        return self._start(seed)

    def load_state(self, state: SceneState, seed: int = 0) -> Observation:
        """Start an episode from an explicit scene (used for replay)."""
        self._vec.load_state(0, state, seed)
        return self._start(seed)

    def _start(self, seed: int) -> Observation:
        self.seed = int(seed)
        self.initial_state = self.state
        self.trajectory = []
        self._started = True
        return self.observation()

    def vec_observation(self) -> VecObservation:
        """The current observation in batched form (one row)."""
        return self._vec.observe()

    def observation(self) -> Observation:
        return _single_observation(self._vec, self._vec.observe(), 0, self._vec.grids[0])

    def step(self, action) -> StepResult:
        if not self._started:
            raise ProtocolError("step() called before reset()")
        if self.done:
            raise ProtocolError("step() called on a finished episode; call reset()")
        if not isinstance(action, Action):
            action = Action(*(int(a) for a in action))
        res = self._vec.step(np.array([[action.bin_x, action.bin_y]]))
        info = _info(res, 0)
        if self.record:
            st = self.state
            self.trajectory.append({
                "step": int(st.step_count),
                "action": [action.bin_x, action.bin_y],
                "pusher": [st.pusher_pose.x, st.pusher_pose.y],
                "object": list(st.object_pose.as_tuple()),
                "obstacles": [list(o.pose.as_tuple()) for o in st.obstacles],
                "reward": float(res.reward[0]),
                "collision": info["collision"],
                "done": bool(res.done[0]),
                "termination": info["termination"],
            })
        return StepResult(self.observation(), float(res.reward[0]), bool(res.done[0]), info)
