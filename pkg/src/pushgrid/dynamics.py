"""Quasi-static pusher-slider dynamics with an ellipsoidal limit surface.

A circular pusher moves kinematically.  When it touches the (convex
polygonal) object and pushes inward, the object's body twist follows the
gradient of

    H(w) = (fx / f_max)^2 + (fy / f_max)^2 + (tau / tau_max)^2,
    f_max = mu_surface * m * g,  tau_max = f_max * c,

so twist ~ (fx, fy, tau / c^2).  The contact force is the one that makes the
contact point move with the pusher (sticking) when it lies inside the
friction cone of the pusher-object contact, otherwise it sits on the cone
edge (sliding) and only the normal velocity is matched.  Obstacles never
influence the motion.

All batched kernels operate elementwise over the leading batch axis, so a
scene produces bit-identical results regardless of the batch it is in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from pushgrid.errors import InvalidInputError, SimulationFault
from pushgrid.scene import Pose2D, ShapeSpec, wrap_angle

GRAVITY = 9.81
CONTACT_DISTANCE = 1e-4
SUBSTEPS = 20
MAX_SPEED = 0.1

SEPARATION = "separation"
STICKING = "sticking"
SLIDING_POS = "sliding_pos"
SLIDING_NEG = "sliding_neg"


@dataclass(frozen=True)
class DynamicsParams:
    static_friction: float = 0.6  # pusher-object Coulomb coefficient
    dynamic_friction: float = 0.3  # object-table coefficient, scales f_max
    restitution: float = 0.5  # stored only; no effect in the quasi-static model
    object_mass: float = 0.5
    gravity: float = GRAVITY
    limit_surface_c: float = 0.0

    @property
    def f_max(self) -> float:
        return self.dynamic_friction * self.object_mass * self.gravity

    @property
    def tau_max(self) -> float:
        return self.f_max * self.limit_surface_c

    def to_dict(self) -> dict:
        return {
            "static_friction": self.static_friction,
            "dynamic_friction": self.dynamic_friction,
            "restitution": self.restitution,
            "object_mass": self.object_mass,
            "gravity": self.gravity,
            "limit_surface_c": self.limit_surface_c,
        }

    @classmethod
    def from_dict(cls, d: dict) -> DynamicsParams:
        return cls(**{k: float(v) for k, v in d.items()})


def sample_params(rng: np.random.Generator, object_shape: ShapeSpec, randomize: bool = True) -> DynamicsParams:
    c = object_shape.limit_surface_c()
    if not randomize:
        return DynamicsParams(limit_surface_c=c)
    return DynamicsParams(
        static_friction=rng.uniform(0.5, 0.7),
        dynamic_friction=rng.uniform(0.2, 0.4),
        restitution=rng.uniform(0.4, 0.6),
        object_mass=rng.uniform(0.4, 0.6),
        limit_surface_c=c,
    )


@dataclass(frozen=True)
class Twist2D:
    vx: float
    vy: float
    omega: float


@dataclass(frozen=True)
class Contact:
    point: tuple[float, float]  # on the object boundary, world frame
    normal: tuple[float, float]  # unit, pointing into the object
    gap: float
    mode: Optional[str] = None


@dataclass(frozen=True)
class Obstacle:
    shape: ShapeSpec
    pose: Pose2D
    velocity: tuple[float, float] = (0.0, 0.0)

    def to_dict(self) -> dict:
        return {"shape": self.shape.to_dict(), "pose": list(self.pose.as_tuple()), "velocity": list(self.velocity)}

    @classmethod
    def from_dict(cls, d: dict) -> Obstacle:
        return cls(ShapeSpec.from_dict(d["shape"]), Pose2D(*d["pose"]), tuple(map(float, d.get("velocity", (0, 0)))))


@dataclass(frozen=True)
class SceneState:
    pusher_pose: Pose2D
    object_pose: Pose2D
    target_pose: Pose2D
    pusher_shape: ShapeSpec
    object_shape: ShapeSpec
    params: DynamicsParams
    obstacles: tuple[Obstacle, ...] = ()
    step_count: int = 0

    def to_dict(self) -> dict:
        return {
            "pusher_pose": list(self.pusher_pose.as_tuple()),
            "object_pose": list(self.object_pose.as_tuple()),
            "target_pose": list(self.target_pose.as_tuple()),
            "pusher_shape": self.pusher_shape.to_dict(),
            "object_shape": self.object_shape.to_dict(),
            "params": self.params.to_dict(),
            "obstacles": [o.to_dict() for o in self.obstacles],
            "step_count": self.step_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SceneState:
        try:
            return cls(
                pusher_pose=Pose2D(*d["pusher_pose"]),
                object_pose=Pose2D(*d["object_pose"]),
                target_pose=Pose2D(*d["target_pose"]),
                pusher_shape=ShapeSpec.from_dict(d["pusher_shape"]),
                object_shape=ShapeSpec.from_dict(d["object_shape"]),
                params=DynamicsParams.from_dict(d["params"]),
                obstacles=tuple(Obstacle.from_dict(o) for o in d.get("obstacles", [])),
                step_count=int(d.get("step_count", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed scene state: {exc}") from exc


# -- batched kernels -------------------------------------------------------------


def _rotate(vec: np.ndarray, c: np.ndarray, s: np.ndarray) -> np.ndarray:
    return np.stack([c * vec[:, 0] - s * vec[:, 1], s * vec[:, 0] + c * vec[:, 1]], axis=1)


def _edges(verts: np.ndarray):
    e = np.roll(verts, -1, axis=1) - verts
    ee = e[..., 0] * e[..., 0] + e[..., 1] * e[..., 1]
    return e, ee


def closest_boundary_point(points: np.ndarray, verts: np.ndarray, radii: np.ndarray, edges=None):
    """Closest object-boundary point to each pusher center, in the body frame.

    points (B, 2), verts (B, K, 2) CCW, radii (B,).  Returns the boundary point,
    the unit outward normal there, and the signed pusher gap (negative when the
    pusher disc overlaps the object).
    """
    e, ee = edges if edges is not None else _edges(verts)
    rel = points[:, None, :] - verts
    ok = ee > 0.0
    t = (rel[..., 0] * e[..., 0] + rel[..., 1] * e[..., 1]) / np.where(ok, ee, 1.0)
    t = np.where(ok, np.clip(t, 0.0, 1.0), 0.0)
    cand = verts + t[..., None] * e
    diff = points[:, None, :] - cand
    d2 = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1]
    k = np.argmin(d2, axis=1)
    idx = np.arange(len(points))
    cp = cand[idx, k]
    dist = np.sqrt(d2[idx, k])
    cross = e[..., 0] * rel[..., 1] - e[..., 1] * rel[..., 0]
    inside = np.all(cross >= 0.0, axis=1)
    ek = e[idx, k]
    ek_norm = np.sqrt(ee[idx, k])
    edge_normal = np.stack([ek[:, 1], -ek[:, 0]], axis=1) / np.where(ek_norm > 0, ek_norm, 1.0)[:, None]
    sign = np.where(inside, -1.0, 1.0)
    safe = np.where(dist > 1e-12, dist, 1.0)
    n_out = np.where((dist > 1e-12)[:, None], (points - cp) / safe[:, None] * sign[:, None], edge_normal)
    gap = sign * dist - radii
    return cp, n_out, gap


def contact_forces(r: np.ndarray, n_in: np.ndarray, vb: np.ndarray, mu: np.ndarray, c: np.ndarray):
    """Solve the quasi-static contact problem for pusher velocity ``vb``.

    All inputs are body frame: contact point r (B, 2), inward normal n_in (B, 2),
    pusher velocity vb (B, 2).  Returns (force (B, 2), mode (B,) int) where the
    force is scaled so that twist = (fx, fy, tau / c^2) realises the contact
    velocity constraint; mode is 0 separation, 1 sticking, 2 sliding_pos,
    3 sliding_neg.
    """
    rx, ry = r[:, 0], r[:, 1]
    c2 = c * c
    m00 = 1.0 + ry * ry / c2
    m01 = -rx * ry / c2
    m11 = 1.0 + rx * rx / c2
    det = m00 * m11 - m01 * m01
    fx = (m11 * vb[:, 0] - m01 * vb[:, 1]) / det
    fy = (-m01 * vb[:, 0] + m00 * vb[:, 1]) / det
    tx, ty = -n_in[:, 1], n_in[:, 0]
    fn = fx * n_in[:, 0] + fy * n_in[:, 1]
    ft = fx * tx + fy * ty
    vn = vb[:, 0] * n_in[:, 0] + vb[:, 1] * n_in[:, 1]
    stick = (fn > 0.0) & (np.abs(ft) <= mu * fn)
    s = np.where(ft >= 0.0, 1.0, -1.0)
    ex = n_in[:, 0] + s * mu * tx
    ey = n_in[:, 1] + s * mu * ty
    ux = m00 * ex + m01 * ey
    uy = m01 * ex + m11 * ey
    un = ux * n_in[:, 0] + uy * n_in[:, 1]
    k = np.where(un > 1e-12, vn / np.where(un > 1e-12, un, 1.0), 0.0)
    force = np.where(stick[:, None], np.stack([fx, fy], axis=1), np.stack([k * ex, k * ey], axis=1))
    pushing = vn > 0.0
    force = np.where(pushing[:, None], force, 0.0)
    mode = np.where(~pushing, 0, np.where(stick, 1, np.where(s > 0, 2, 3)))
    return force, mode


def _se2_increment(vx, vy, omega, h):
    """Body-frame displacement of a constant twist held for time h."""
    a = omega * h
    small = np.abs(a) < 1e-6
    a_safe = np.where(small, 1.0, a)
    sa = np.where(small, 1.0 - a * a / 6.0, np.sin(a_safe) / a_safe)
    ca = np.where(small, a / 2.0 - a ** 3 / 24.0, (1.0 - np.cos(a_safe)) / a_safe)
    dx = h * (sa * vx - ca * vy)
    dy = h * (ca * vx + sa * vy)
    return dx, dy, a


def step_batch(
    pusher_xy: np.ndarray,
    pusher_r: np.ndarray,
    obj_pose: np.ndarray,
    obj_verts: np.ndarray,
    mu: np.ndarray,
    ls_c: np.ndarray,
    vel: np.ndarray,
    dt: float = 0.1,
    substeps: int = SUBSTEPS,
):
    """Advance a batch of pusher/object pairs by ``dt``.

    Returns (pusher_xy, obj_pose, contact) where ``contact`` flags scenes in
    which the pusher drove the object during any substep.  Scenes whose pusher
    cannot reach the object within ``dt`` skip the contact solve; that choice
    depends only on the scene itself, so results stay batch-independent.
    """
    p = np.array(pusher_xy, dtype=float)
    q = np.array(obj_pose, dtype=float)
    vel = np.asarray(vel, dtype=float)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q)) and np.all(np.isfinite(vel))):
        raise SimulationFault("non-finite state or action passed to the simulator")
    h = dt / substeps
    touched = np.zeros(len(p), dtype=bool)
    reach = np.sqrt(np.max(np.sum(obj_verts * obj_verts, axis=-1), axis=1)) + pusher_r
    reach += np.hypot(vel[:, 0], vel[:, 1]) * dt + 1e-3
    near = np.hypot(p[:, 0] - q[:, 0], p[:, 1] - q[:, 1]) <= reach
    far = ~near
    if far.any():
        pf, vf = p[far], vel[far]
        for _ in range(substeps):
            pf = pf + vf * h
        p[far] = pf
    if near.any():
        pn, qn, tn = _contact_substeps(p[near], pusher_r[near], q[near], obj_verts[near], mu[near], ls_c[near],
                                       vel[near], h, substeps)
        p[near], q[near], touched[near] = pn, qn, tn
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise SimulationFault("simulation produced a non-finite state")
    return p, q, touched


def _contact_substeps(p, pusher_r, q, obj_verts, mu, ls_c, vel, h, substeps):
    edges = _edges(obj_verts)
    touched = np.zeros(len(p), dtype=bool)
    c2 = ls_c * ls_c
    c, s = np.cos(q[:, 2]), np.sin(q[:, 2])
    pb = _rotate(p - q[:, :2], c, -s)
    cp, n_out, gap = closest_boundary_point(pb, obj_verts, pusher_r, edges)
    for _ in range(substeps):
        # Out-of-range scenes get zero force, which leaves their pose untouched.
        k = np.flatnonzero(gap <= CONTACT_DISTANCE)
        if k.size:
            ck, sk, cpk = c[k], s[k], cp[k]
            force, mode = contact_forces(cpk, -n_out[k], _rotate(vel[k], ck, -sk), mu[k], ls_c[k])
            active = mode > 0
            touched[k] |= active
            fx = np.where(active, force[:, 0], 0.0)
            fy = np.where(active, force[:, 1], 0.0)
            omega = np.where(active, (cpk[:, 0] * fy - cpk[:, 1] * fx) / c2[k], 0.0)
            dx, dy, dth = _se2_increment(fx, fy, omega, h)
            q[k, 0] += ck * dx - sk * dy
            q[k, 1] += sk * dx + ck * dy
            q[k, 2] += dth
        q[:, 2] = wrap_angle(q[:, 2])
        p = p + vel * h
        # Resolve residual penetration by translating the object along the normal.
        c, s = np.cos(q[:, 2]), np.sin(q[:, 2])
        pb = _rotate(p - q[:, :2], c, -s)
        cp, n_out, gap = closest_boundary_point(pb, obj_verts, pusher_r, edges)
        push = np.where(gap < 0.0, -gap, 0.0)
        n_world = _rotate(-n_out, c, s)
        q[:, :2] += n_world * push[:, None]
        # The next substep starts from this geometry; only corrected scenes moved.
        moved = np.flatnonzero(push > 0.0)
        if moved.size:
            pb[moved] = _rotate(p[moved] - q[moved, :2], c[moved], -s[moved])
            sub = tuple(a[moved] for a in edges)
            cp[moved], n_out[moved], gap[moved] = closest_boundary_point(
                pb[moved], obj_verts[moved], pusher_r[moved], sub)
    return p, q, touched


# -- single-scene API ----------------------------------------------------------------


def _polygon_verts(shape: ShapeSpec) -> np.ndarray:
    if shape.kind != "polygon":
        raise InvalidInputError("the pushed object must be a single convex polygon")
    return shape.convex_parts()[0][1]


def _pusher_radius(shape: ShapeSpec) -> float:
    if shape.kind != "circle":
        raise InvalidInputError("the pusher must be a circle")
    return shape.radius * shape.scale


def find_contact(
    pusher: tuple[ShapeSpec, Pose2D], obj: tuple[ShapeSpec, Pose2D], distance: float = CONTACT_DISTANCE
) -> Optional[Contact]:
    """Closest boundary point and inward normal, or None if the gap exceeds ``distance``."""
    r = _pusher_radius(pusher[0])
    verts = _polygon_verts(obj[0])
    pose = obj[1]
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    rel = pusher[1].xy - pose.xy
    pb = np.array([[c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1]]])
    cp, n_out, gap = closest_boundary_point(pb, verts[None], np.array([r]))
    if gap[0] > distance:
        return None
    point = pose.transform(cp)[0]
    n_in = -n_out[0]
    normal = (c * n_in[0] - s * n_in[1], s * n_in[0] + c * n_in[1])
    return Contact(tuple(point), normal, float(gap[0]))


_MODE_NAMES = {0: SEPARATION, 1: STICKING, 2: SLIDING_POS, 3: SLIDING_NEG}


def _body_frame(contact: Contact, vector, object_pose: Pose2D):
    c, s = math.cos(object_pose.theta), math.sin(object_pose.theta)

    def rot(v):
        return np.array([[c * v[0] + s * v[1], -s * v[0] + c * v[1]]])

    r = rot(np.asarray(contact.point) - object_pose.xy)
    return r, rot(contact.normal), rot(vector)


def classify_mode(contact: Contact, pusher_vel, params: DynamicsParams, object_pose: Pose2D) -> str:
    """Contact mode induced by pusher velocity ``pusher_vel`` (world frame)."""
    r, n_in, vb = _body_frame(contact, pusher_vel, object_pose)
    _, mode = contact_forces(r, n_in, vb, np.array([params.static_friction]), np.array([params.limit_surface_c]))
    return _MODE_NAMES[int(mode[0])]


def solve_contact(contact: Contact, pusher_vel, params: DynamicsParams, object_pose: Pose2D):
    """Body-frame contact force and resulting body twist for one contact."""
    r, n_in, vb = _body_frame(contact, pusher_vel, object_pose)
    force, mode = contact_forces(r, n_in, vb, np.array([params.static_friction]), np.array([params.limit_surface_c]))
    f = force[0]
    omega = (r[0, 0] * f[1] - r[0, 1] * f[0]) / params.limit_surface_c ** 2
    return f, Twist2D(float(f[0]), float(f[1]), float(omega)), _MODE_NAMES[int(mode[0])]


def limit_surface_twist(contact_force, contact_point, params: DynamicsParams, object_pose: Pose2D) -> Twist2D:
    """Body twist along the limit-surface gradient for a world-frame contact force.

    The result is grad H(w) * f_max / 2 = (fx, fy, tau / c^2) / f_max, i.e.
    the gradient direction in units where a force of magnitude f_max through
    the centroid gives unit speed.
    """
    fx_w, fy_w = contact_force
    if fx_w == 0.0 and fy_w == 0.0:
        return Twist2D(0.0, 0.0, 0.0)
    c, s = math.cos(object_pose.theta), math.sin(object_pose.theta)
    fx, fy = c * fx_w + s * fy_w, -s * fx_w + c * fy_w
    dx, dy = contact_point[0] - object_pose.x, contact_point[1] - object_pose.y
    rx, ry = c * dx + s * dy, -s * dx + c * dy
    tau = rx * fy - ry * fx
    f_max = params.f_max
    return Twist2D(fx / f_max, fy / f_max, tau / (params.limit_surface_c ** 2 * f_max))


def step(scene: SceneState, pusher_vel, dt: float = 0.1, substeps: int = SUBSTEPS) -> SceneState:
    """Advance one scene; obstacles are left untouched."""
    vel = np.asarray(pusher_vel, dtype=float).reshape(1, 2)
    p, q, _ = step_batch(
        scene.pusher_pose.xy[None],
        np.array([_pusher_radius(scene.pusher_shape)]),
        np.array([scene.object_pose.as_tuple()]),
        _polygon_verts(scene.object_shape)[None],
        np.array([scene.params.static_friction]),
        np.array([scene.params.limit_surface_c]),
        vel,
        dt,
        substeps,
    )
    return replace(
        scene,
        pusher_pose=Pose2D(p[0, 0], p[0, 1], scene.pusher_pose.theta),
        object_pose=Pose2D(*q[0]),
    )
