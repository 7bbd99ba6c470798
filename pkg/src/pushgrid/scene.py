"""Planar geometry: poses, shapes, the workspace, occupancy grids and patches.

Grid convention: row 0 is the top edge of the workspace (largest y), column 0
the left edge (smallest x).  Cell ``(r, c)`` has its center at

    x = origin_x + (c + 0.5) * resolution
    y = origin_y + height - (r + 0.5) * resolution
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from pushgrid.errors import InvalidInputError

RESOLUTION = 0.005
GRID_ROWS = 100
GRID_COLS = 140
PATCH_SIZE = 16
# Separation below which two footprints count as interpenetrating.
CONTACT_EPS = 1e-9


def wrap_angle(theta):
    """Wrap an angle (scalar or array) to (-pi, pi].

    Values already in range are returned bit-identical.
    """
    if np.ndim(theta) == 0:
        t = float(theta)
        if -math.pi < t <= math.pi:
            return t
        t = math.remainder(t, 2.0 * math.pi)
        return t + 2.0 * math.pi if t <= -math.pi else t
    theta = np.asarray(theta, dtype=float)
    inside = (theta > -math.pi) & (theta <= math.pi)
    w = np.remainder(theta + math.pi, 2.0 * math.pi) - math.pi
    w = np.where(w <= -math.pi, w + 2.0 * math.pi, w)
    return np.where(inside, theta, w)


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.theta)):
            raise InvalidInputError(f"non-finite pose {self!r}")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map body-frame points (N, 2) into the world frame."""
        return np.asarray(points, dtype=float) @ rotation(self.theta).T + self.xy


def _check_convex_ccw(vertices: np.ndarray) -> None:
    if vertices.ndim != 2 or vertices.shape[1] != 2 or len(vertices) < 3:
        raise InvalidInputError("polygon needs at least 3 (x, y) vertices")
    if not np.all(np.isfinite(vertices)):
        raise InvalidInputError("polygon vertices must be finite")
    edges = np.roll(vertices, -1, axis=0) - vertices
    nxt = np.roll(edges, -1, axis=0)
    cross = edges[:, 0] * nxt[:, 1] - edges[:, 1] * nxt[:, 0]
    if np.any(cross <= 0.0):
        raise InvalidInputError("polygon must be strictly convex and counter-clockwise")


@dataclass(frozen=True)
class ShapeSpec:
    """A planar footprint in its body frame.

    ``kind`` is ``"circle"``, ``"polygon"`` (one convex CCW polygon) or
    ``"composite"`` (a union of convex polygons, used for cross/T/L shapes).
    ``scale`` multiplies every length.
    """

    kind: str
    radius: float = 0.0
    vertices: tuple[tuple[float, float], ...] = ()
    parts: tuple[tuple[tuple[float, float], ...], ...] = ()
    scale: float = 1.0
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise InvalidInputError("shape scale must be positive")
        if self.kind == "circle":
            if not (math.isfinite(self.radius) and self.radius > 0):
                raise InvalidInputError("circle radius must be positive")
        elif self.kind == "polygon":
            _check_convex_ccw(np.asarray(self.vertices, dtype=float))
        elif self.kind == "composite":
            if not self.parts:
                raise InvalidInputError("composite shape needs at least one part")
            for part in self.parts:
                _check_convex_ccw(np.asarray(part, dtype=float))
        else:
            raise InvalidInputError(f"unknown shape kind {self.kind!r}")

    def with_scale(self, scale: float) -> ShapeSpec:
        return ShapeSpec(self.kind, self.radius, self.vertices, self.parts, float(scale), self.name)

    def convex_parts(self) -> list[tuple[str, object]]:
        """Scaled body-frame parts: ``("circle", r)`` or ``("polygon", (K, 2) array)``."""
        if self.kind == "circle":
            return [("circle", self.radius * self.scale)]
        polys = [self.vertices] if self.kind == "polygon" else list(self.parts)
        return [("polygon", np.asarray(p, dtype=float) * self.scale) for p in polys]

    def world_parts(self, pose: Pose2D) -> list[tuple[str, object]]:
        """Parts in world coordinates: ``("circle", (cx, cy, r))`` or ``("polygon", (K, 2))``."""
        out = []
        for kind, geom in self.convex_parts():
            if kind == "circle":
                out.append(("circle", (pose.x, pose.y, geom)))
            else:
                out.append(("polygon", pose.transform(geom)))
        return out

    @property
    def max_vertices(self) -> int:
        if self.kind == "circle":
            return 0
        return max(len(p) for _, p in self.convex_parts())

    def bounding_radius(self) -> float:
        """Radius of the smallest origin-centred disc containing the footprint."""
        if self.kind == "circle":
            return self.radius * self.scale
        polys = [self.vertices] if self.kind == "polygon" else self.parts
        return max(math.hypot(x, y) for p in polys for x, y in p) * self.scale

    def limit_surface_c(self) -> float:
        """Mean distance from the body origin to points of the footprint."""
        return _unit_mean_distance(self.kind, self.radius, self.vertices, self.parts) * self.scale

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "scale": self.scale}
        if self.name:
            d["name"] = self.name
        if self.kind == "circle":
            d["radius"] = self.radius
        elif self.kind == "polygon":
            d["vertices"] = [list(v) for v in self.vertices]
        else:
            d["parts"] = [[list(v) for v in p] for p in self.parts]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ShapeSpec:
        try:
            kind = d["kind"]
            scale = float(d.get("scale", 1.0))
            name = d.get("name", "")
            if kind == "circle":
                return cls("circle", radius=float(d["radius"]), scale=scale, name=name)
            if kind == "polygon":
                return cls("polygon", vertices=tuple(tuple(map(float, v)) for v in d["vertices"]), scale=scale, name=name)
            if kind == "composite":
                parts = tuple(tuple(tuple(map(float, v)) for v in p) for p in d["parts"])
                return cls("composite", parts=parts, scale=scale, name=name)
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed shape description: {exc}") from exc
        raise InvalidInputError(f"unknown shape kind {kind!r}")


@lru_cache(maxsize=256)
def _unit_mean_distance(kind, radius, vertices, parts) -> float:
    return mean_distance_to_origin(ShapeSpec(kind, radius, vertices, parts))


def mean_distance_to_origin(shape: ShapeSpec, samples: int = 400) -> float:
    """Area-average of |p| over the footprint, by midpoint quadrature on a grid."""
    if shape.kind == "circle":
        return 2.0 * shape.radius * shape.scale / 3.0
    polys = [p for _, p in shape.convex_parts()]
    allv = np.concatenate(polys)
    lo, hi = allv.min(axis=0), allv.max(axis=0)
    xs = lo[0] + (np.arange(samples) + 0.5) * (hi[0] - lo[0]) / samples
    ys = lo[1] + (np.arange(samples) + 0.5) * (hi[1] - lo[1]) / samples
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    inside = np.zeros(len(pts), dtype=bool)
    for poly in polys:
        inside |= points_in_convex_polygon(pts, poly)
    return float(np.linalg.norm(pts[inside], axis=1).mean())


# -- shape library ------------------------------------------------------------


def circle(radius: float, scale: float = 1.0, name: str = "circle") -> ShapeSpec:
    return ShapeSpec("circle", radius=radius, scale=scale, name=name)


def _rect_vertices(w: float, h: float, cx: float = 0.0, cy: float = 0.0):
    return (
        (cx - w / 2, cy - h / 2),
        (cx + w / 2, cy - h / 2),
        (cx + w / 2, cy + h / 2),
        (cx - w / 2, cy + h / 2),
    )


def rectangle(width: float, height: float, scale: float = 1.0, name: str = "rectangle") -> ShapeSpec:
    return ShapeSpec("polygon", vertices=_rect_vertices(width, height), scale=scale, name=name)


def cross_shape(arm: float = 0.12, bar: float = 0.04, scale: float = 1.0) -> ShapeSpec:
    parts = (_rect_vertices(arm, bar), _rect_vertices(bar, arm))
    return ShapeSpec("composite", parts=parts, scale=scale, name="cross")


def t_shape(width: float = 0.12, stem: float = 0.08, bar: float = 0.04, scale: float = 1.0) -> ShapeSpec:
    # Origin at the bounding-box center; the top bar spans the full width.
    total = stem + bar
    top_cy = total / 2 - bar / 2
    stem_cy = -total / 2 + stem / 2
    parts = (_rect_vertices(width, bar, 0.0, top_cy), _rect_vertices(bar, stem, 0.0, stem_cy))
    return ShapeSpec("composite", parts=parts, scale=scale, name="t_shape")


def l_shape(width: float = 0.12, height: float = 0.10, bar: float = 0.04, scale: float = 1.0) -> ShapeSpec:
    foot_cy = -height / 2 + bar / 2
    leg_cx = -width / 2 + bar / 2
    leg_h = height - bar
    parts = (
        _rect_vertices(width, bar, 0.0, foot_cy),
        _rect_vertices(bar, leg_h, leg_cx, foot_cy + bar / 2 + leg_h / 2),
    )
    return ShapeSpec("composite", parts=parts, scale=scale, name="l_shape")


# -- workspace and grids --------------------------------------------------------


@dataclass(frozen=True)
class Workspace:
    width: float = GRID_COLS * RESOLUTION
    height: float = GRID_ROWS * RESOLUTION
    origin: tuple[float, float] = (0.0, 0.0)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(x_min, y_min, x_max, y_max)."""
        ox, oy = self.origin
        return (ox, oy, ox + self.width, oy + self.height)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    @property
    def center(self) -> tuple[float, float]:
        return (self.origin[0] + self.width / 2, self.origin[1] + self.height / 2)

    def grid_shape(self, resolution: float = RESOLUTION) -> tuple[int, int]:
        return (int(round(self.height / resolution)), int(round(self.width / resolution)))

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> Workspace:
        return cls(float(d["width"]), float(d["height"]), tuple(map(float, d.get("origin", (0.0, 0.0)))))


@dataclass
class OccupancyGrid:
    cells: np.ndarray  # (rows, cols) uint8, 1 = obstacle
    resolution: float = RESOLUTION
    workspace: Workspace = field(default_factory=Workspace)

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    @property
    def cols(self) -> int:
        return self.cells.shape[1]

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        return cell_centers(self.workspace, self.resolution)

    def __eq__(self, other):
        return (
            isinstance(other, OccupancyGrid)
            and self.resolution == other.resolution
            and self.workspace == other.workspace
            and np.array_equal(self.cells, other.cells)
        )


@dataclass
class PatchSet:
    patches: np.ndarray  # (n, patch_size**2) uint8, row-major patches
    origins: np.ndarray  # (n, 2) world coordinates of each patch's upper-left corner
    grid_shape: tuple[int, int]
    patch_size: int = PATCH_SIZE

    @property
    def n(self) -> int:
        return len(self.patches)

    @property
    def patch_grid(self) -> tuple[int, int]:
        rows, cols = self.grid_shape
        return (-(-rows // self.patch_size), -(-cols // self.patch_size))


def cell_centers(workspace: Workspace, resolution: float) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = workspace.grid_shape(resolution)
    ox, oy = workspace.origin
    xs = ox + (np.arange(cols) + 0.5) * resolution
    ys = oy + workspace.height - (np.arange(rows) + 0.5) * resolution
    return xs, ys


def points_in_convex_polygon(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Closed membership test of (N, 2) points in a CCW convex polygon."""
    edges = np.roll(poly, -1, axis=0) - poly
    rel = points[:, None, :] - poly[None, :, :]
    cross = edges[None, :, 0] * rel[..., 1] - edges[None, :, 1] * rel[..., 0]
    return np.all(cross >= 0.0, axis=1)


def _part_mask(kind: str, geom, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    if kind == "circle":
        cx, cy, r = geom
        return (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2 <= r * r
    poly = geom
    mask = np.ones((len(ys), len(xs)), dtype=bool)
    edges = np.roll(poly, -1, axis=0) - poly
    for (vx, vy), (ex, ey) in zip(poly, edges):
        mask &= (ex * (ys[:, None] - vy) - ey * (xs[None, :] - vx)) >= 0.0
    return mask


def _part_bbox(kind: str, geom) -> tuple[float, float, float, float]:
    if kind == "circle":
        cx, cy, r = geom
        return cx - r, cy - r, cx + r, cy + r
    lo, hi = geom.min(axis=0), geom.max(axis=0)
    return lo[0], lo[1], hi[0], hi[1]


def rasterize(
    obstacles: Iterable[tuple[ShapeSpec, Pose2D]],
    workspace: Workspace = Workspace(),
    resolution: float = RESOLUTION,
) -> OccupancyGrid:
    """Binary occupancy grid: a cell is 1 iff its center lies in some obstacle."""
    if not (resolution > 0 and math.isfinite(resolution)):
        raise InvalidInputError("resolution must be positive")
    xs, ys = cell_centers(workspace, resolution)
    cells = np.zeros((len(ys), len(xs)), dtype=bool)
    pad = 1e-9 * max(1.0, workspace.width, workspace.height)
    for shape, pose in obstacles:
        if not isinstance(pose, Pose2D):
            pose = Pose2D(*pose)
        for kind, geom in shape.world_parts(pose):
            # Only cells whose centers fall in the part's bounding box can be inside.
            x0, y0, x1, y1 = _part_bbox(kind, geom)
            c0, c1 = np.searchsorted(xs, x0 - pad), np.searchsorted(xs, x1 + pad, side="right")
            r0 = len(ys) - np.searchsorted(ys[::-1], y1 + pad, side="right")
            r1 = len(ys) - np.searchsorted(ys[::-1], y0 - pad)
            if c0 >= c1 or r0 >= r1:
                continue
            cells[r0:r1, c0:c1] |= _part_mask(kind, geom, xs[c0:c1], ys[r0:r1])
    return OccupancyGrid(cells.astype(np.uint8), resolution, workspace)


def patch_array(cells: np.ndarray, patch_size: int = PATCH_SIZE) -> np.ndarray:
    """(n, patch_size**2) row-major patches of ``cells``, zero-padded right and bottom."""
    rows, cols = cells.shape
    pr, pc = -(-rows // patch_size), -(-cols // patch_size)
    padded = np.zeros((pr * patch_size, pc * patch_size), dtype=np.uint8)
    padded[:rows, :cols] = cells
    blocks = padded.reshape(pr, patch_size, pc, patch_size).transpose(0, 2, 1, 3)
    return np.ascontiguousarray(blocks.reshape(pr * pc, patch_size * patch_size))


def decompose_patches(grid: OccupancyGrid, patch_size: int = PATCH_SIZE) -> PatchSet:
    """Split a grid into row-major square patches, zero-padding right and bottom."""
    rows, cols = grid.rows, grid.cols
    patches = patch_array(grid.cells, patch_size)
    origins = patch_origins(grid.workspace, grid.resolution, (rows, cols), patch_size)
    return PatchSet(patches, origins, (rows, cols), patch_size)


def patch_origins(
    workspace: Workspace, resolution: float, grid_shape: tuple[int, int], patch_size: int = PATCH_SIZE
) -> np.ndarray:
    rows, cols = grid_shape
    pr, pc = -(-rows // patch_size), -(-cols // patch_size)
    ox, oy = workspace.origin
    top = oy + workspace.height
    ii, jj = np.meshgrid(np.arange(pr), np.arange(pc), indexing="ij")
    x = ox + jj.ravel() * patch_size * resolution
    y = top - ii.ravel() * patch_size * resolution
    return np.stack([x, y], axis=1)


def reassemble_patches(patches: PatchSet) -> np.ndarray:
    """Inverse of :func:`decompose_patches` with the padding dropped."""
    p = patches.patch_size
    pr, pc = patches.patch_grid
    blocks = patches.patches.reshape(pr, pc, p, p).transpose(0, 2, 1, 3)
    rows, cols = patches.grid_shape
    return blocks.reshape(pr * p, pc * p)[:rows, :cols]


# -- distance and collision -------------------------------------------------------


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0.0 else min(1.0, max(0.0, float((p - a) @ ab) / denom))
    return float(np.linalg.norm(p - (a + t * ab)))


def _points_polyline_distance(pts: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Distance from each point (N, 2) to the closed boundary of ``poly``."""
    a = poly
    ab = np.roll(poly, -1, axis=0) - a
    denom = np.einsum("ij,ij->i", ab, ab)
    rel = pts[:, None, :] - a[None]
    t = np.einsum("nij,ij->ni", rel, ab) / np.where(denom > 0, denom, 1.0)
    t = np.clip(np.where(denom > 0, t, 0.0), 0.0, 1.0)
    d = rel - t[..., None] * ab[None]
    return np.sqrt(np.min(np.einsum("nij,nij->ni", d, d), axis=1))


def _point_polygon_signed_distance(p: np.ndarray, poly: np.ndarray) -> float:
    """Negative inside (minus the depth to the boundary), positive outside."""
    d = float(_points_polyline_distance(p[None, :], poly)[0])
    inside = bool(points_in_convex_polygon(p[None, :], poly)[0])
    return -d if inside else d


def _sat_overlap(a: np.ndarray, b: np.ndarray) -> float:
    """Smallest projection overlap over all edge normals (negative = separated)."""
    best = math.inf
    for poly in (a, b):
        edges = np.roll(poly, -1, axis=0) - poly
        for ex, ey in edges:
            axis = np.array([ey, -ex])
            norm = math.hypot(ex, ey)
            if norm == 0.0:
                continue
            axis /= norm
            pa, pb = a @ axis, b @ axis
            best = min(best, min(pa.max(), pb.max()) - max(pa.min(), pb.min()))
    return best


def _part_signed_distance(pa: tuple[str, object], pb: tuple[str, object]) -> float:
    ka, ga = pa
    kb, gb = pb
    if ka == "circle" and kb == "circle":
        return math.hypot(ga[0] - gb[0], ga[1] - gb[1]) - ga[2] - gb[2]
    if ka == "circle":
        return _point_polygon_signed_distance(np.array(ga[:2]), gb) - ga[2]
    if kb == "circle":
        return _point_polygon_signed_distance(np.array(gb[:2]), ga) - gb[2]
    overlap = _sat_overlap(ga, gb)
    if overlap > 0.0:
        return -overlap
    # Disjoint convex polygons: closest pair involves a vertex of one of them.
    return float(min(_points_polyline_distance(ga, gb).min(), _points_polyline_distance(gb, ga).min()))


def signed_distance(a: tuple[ShapeSpec, Pose2D], b: tuple[ShapeSpec, Pose2D]) -> float:
    """Minimum distance between two footprints; negative when they overlap.

    For overlapping polygon parts the magnitude is the separating-axis
    penetration depth.
    """
    parts_a = a[0].world_parts(a[1])
    parts_b = b[0].world_parts(b[1])
    return min(_part_signed_distance(pa, pb) for pa in parts_a for pb in parts_b)


def collide(
    a: tuple[ShapeSpec, Pose2D], b: tuple[ShapeSpec, Pose2D], tolerance: float = 0.0
) -> bool:
    """True iff the footprints come closer than ``tolerance``.

    With ``tolerance=0`` touching shapes do not collide; they must
    interpenetrate by more than ``CONTACT_EPS``.
    """
    ra, rb = a[0].bounding_radius(), b[0].bounding_radius()
    if math.hypot(a[1].x - b[1].x, a[1].y - b[1].y) > ra + rb + max(tolerance, 0.0) + 1e-9:
        return False
    return signed_distance(a, b) < tolerance - CONTACT_EPS


def footprint_bounds(shape: ShapeSpec, pose: Pose2D) -> tuple[float, float, float, float]:
    lo = np.full(2, math.inf)
    hi = np.full(2, -math.inf)
    for kind, geom in shape.world_parts(pose):
        if kind == "circle":
            cx, cy, r = geom
            lo = np.minimum(lo, [cx - r, cy - r])
            hi = np.maximum(hi, [cx + r, cy + r])
        else:
            lo = np.minimum(lo, geom.min(axis=0))
            hi = np.maximum(hi, geom.max(axis=0))
    return (lo[0], lo[1], hi[0], hi[1])


def in_workspace(shape: ShapeSpec, pose: Pose2D, workspace: Workspace = Workspace()) -> bool:
    """True iff the whole footprint lies inside the workspace rectangle."""
    x0, y0, x1, y1 = footprint_bounds(shape, pose)
    bx0, by0, bx1, by1 = workspace.bounds
    return bx0 <= x0 and by0 <= y0 and x1 <= bx1 and y1 <= by1


# -- batched part arrays (used by the vectorised environment) ----------------------


@dataclass
class PartArrays:
    """Obstacle parts of a batch of scenes, padded to common sizes.

    ``poly`` is (B, P, K, 2) world vertices with polygons of fewer than K
    vertices padded by repeating their last vertex; ``circ`` is (B, C, 3).
    ``*_owner`` maps a part to the index of its obstacle in the scene.
    """

    poly: np.ndarray
    poly_mask: np.ndarray
    poly_owner: np.ndarray
    circ: np.ndarray
    circ_mask: np.ndarray
    circ_owner: np.ndarray

    @classmethod
    def build(cls, scenes: Sequence[Sequence[tuple[ShapeSpec, Pose2D]]], max_vertices: int = 4) -> PartArrays:
        polys, circs = [], []
        for obstacles in scenes:
            p_list, c_list = [], []
            for owner, (shape, pose) in enumerate(obstacles):
                for kind, geom in shape.world_parts(pose):
                    if kind == "circle":
                        c_list.append((geom, owner))
                    else:
                        p_list.append((geom, owner))
                        max_vertices = max(max_vertices, len(geom))
            polys.append(p_list)
            circs.append(c_list)
        B = len(scenes)
        P = max([1] + [len(p) for p in polys])
        C = max([1] + [len(c) for c in circs])
        poly = np.zeros((B, P, max_vertices, 2))
        poly_mask = np.zeros((B, P), dtype=bool)
        poly_owner = np.full((B, P), -1, dtype=np.int64)
        circ = np.zeros((B, C, 3))
        circ[..., 2] = 1.0
        circ_mask = np.zeros((B, C), dtype=bool)
        circ_owner = np.full((B, C), -1, dtype=np.int64)
        for b in range(B):
            for j, (geom, owner) in enumerate(polys[b]):
                k = len(geom)
                poly[b, j, :k] = geom
                poly[b, j, k:] = geom[-1]
                poly_mask[b, j] = True
                poly_owner[b, j] = owner
            for j, (geom, owner) in enumerate(circs[b]):
                circ[b, j] = geom
                circ_mask[b, j] = True
                circ_owner[b, j] = owner
        return cls(poly, poly_mask, poly_owner, circ, circ_mask, circ_owner)


def _point_poly_sd_batch(points: np.ndarray, polys: np.ndarray) -> np.ndarray:
    """Signed distance of points (..., 2) to convex CCW polygons (..., K, 2)."""
    a = polys
    e = np.roll(polys, -1, axis=-2) - a
    rel = points[..., None, :] - a
    ee = np.sum(e * e, axis=-1)
    safe = np.where(ee > 0.0, ee, 1.0)
    t = np.clip(np.sum(rel * e, axis=-1) / safe, 0.0, 1.0)
    t = np.where(ee > 0.0, t, 0.0)
    diff = rel - t[..., None] * e
    dist = np.sqrt(np.min(np.sum(diff * diff, axis=-1), axis=-1))
    cross = e[..., 0] * rel[..., 1] - e[..., 1] * rel[..., 0]
    inside = np.all(cross >= 0.0, axis=-1)
    return np.where(inside, -dist, dist)


def circles_hit_parts(centers: np.ndarray, radii: np.ndarray, parts: PartArrays) -> np.ndarray:
    """(B,) bool: circle b interpenetrates any obstacle part of scene b."""
    sd_poly = _point_poly_sd_batch(centers[:, None, :], parts.poly) - radii[:, None]
    hit = np.any((sd_poly < -CONTACT_EPS) & parts.poly_mask, axis=1)
    d = np.hypot(parts.circ[..., 0] - centers[:, None, 0], parts.circ[..., 1] - centers[:, None, 1])
    sd_circ = d - parts.circ[..., 2] - radii[:, None]
    hit |= np.any((sd_circ < -CONTACT_EPS) & parts.circ_mask, axis=1)
    return hit


def _sat_overlap_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimum projection overlap of polygon pairs a (..., Ka, 2), b (..., Kb, 2)."""
    best = None
    for poly in (a, b):
        e = np.roll(poly, -1, axis=-2) - poly
        norm = np.hypot(e[..., 0], e[..., 1])
        ok = norm > 0.0
        safe = np.where(ok, norm, 1.0)
        ax = np.stack([e[..., 1] / safe, -e[..., 0] / safe], axis=-1)  # (..., K, 2)
        pa = np.einsum("...kd,...jd->...kj", ax, a)
        pb = np.einsum("...kd,...jd->...kj", ax, b)
        ov = np.minimum(pa.max(-1), pb.max(-1)) - np.maximum(pa.min(-1), pb.min(-1))
        ov = np.where(ok, ov, np.inf)
        m = ov.min(axis=-1)
        best = m if best is None else np.minimum(best, m)
    return best


def polygons_hit_parts(polys: np.ndarray, parts: PartArrays) -> np.ndarray:
    """(B,) bool: convex polygon b (B, K, 2) interpenetrates any part of scene b."""
    P = parts.poly.shape[1]
    a = np.broadcast_to(polys[:, None], (polys.shape[0], P) + polys.shape[1:])
    overlap = _sat_overlap_batch(a, parts.poly)
    hit = np.any((overlap > CONTACT_EPS) & parts.poly_mask, axis=1)
    C = parts.circ.shape[1]
    a = np.broadcast_to(polys[:, None], (polys.shape[0], C) + polys.shape[1:])
    sd = _point_poly_sd_batch(parts.circ[..., :2], a) - parts.circ[..., 2]
    hit |= np.any((sd < -CONTACT_EPS) & parts.circ_mask, axis=1)
    return hit


# -- files ------------------------------------------------------------------------


def save_scene(path, obstacles: Sequence[tuple[ShapeSpec, Pose2D]], workspace: Workspace = Workspace(),
               resolution: float = RESOLUTION) -> None:
    doc = {
        "workspace": workspace.to_dict(),
        "resolution": resolution,
        "obstacles": [{"shape": s.to_dict(), "pose": list(p.as_tuple())} for s, p in obstacles],
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_scene(path) -> tuple[list[tuple[ShapeSpec, Pose2D]], Workspace, float]:
    try:
        doc = json.loads(Path(path).read_text())
        workspace = Workspace.from_dict(doc["workspace"])
        resolution = float(doc.get("resolution", RESOLUTION))
        obstacles = [(ShapeSpec.from_dict(o["shape"]), Pose2D(*o["pose"])) for o in doc.get("obstacles", [])]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InvalidInputError(f"cannot read scene file {path}: {exc}") from exc
    return obstacles, workspace, resolution


def write_pgm(path, grid: OccupancyGrid) -> None:
    """Binary PGM (P5); obstacles black, free space white."""
    pixels = np.where(grid.cells > 0, 0, 255).astype(np.uint8)
    header = f"P5\n{grid.cols} {grid.rows}\n255\n".encode()
    Path(path).write_bytes(header + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise InvalidInputError(f"{path} is not a binary PGM")
    cols, rows = map(int, parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=rows * cols).reshape(rows, cols)
    return (pixels == 0).astype(np.uint8)
