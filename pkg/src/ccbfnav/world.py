"""Procedural corridor worlds with spherical obstacles.

The corridor runs along +x. Its cross-section is the box y in [0, width],
z in [0, height]; the four walls are half-spaces outside that box and extend
indefinitely along x, so both longitudinal ends are open. Obstacle centers
are restricted to x in [0, length].
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

WORLD_SCHEMA_VERSION = 1


class WorldError(ValueError):
    """Invalid world specification or degenerate generation result."""


@dataclass(frozen=True)
class WorldSpec:
    corridor_length: float = 40.0
    corridor_width: float = 8.0
    corridor_height: float = 8.0
    obstacle_diameter: float = 1.0
    r_sep: float = 3.0
    clear_radius_start: float = 3.0
    clear_radius_goal: float = 3.0
    seed: int = 0
    max_rejections: int = 10_000

    def validate(self) -> None:
        for name in ("corridor_length", "corridor_width", "corridor_height",
                     "obstacle_diameter", "r_sep"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise WorldError(f"{name} must be strictly positive, got {value!r}")
        for name in ("clear_radius_start", "clear_radius_goal"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise WorldError(f"{name} must be >= 0, got {value!r}")
        if self.obstacle_diameter >= min(self.corridor_width, self.corridor_height):
            raise WorldError("obstacle_diameter does not fit in the corridor cross-section")
        if not 0 <= int(self.seed) < 2**64:
            raise WorldError("seed must be a 64-bit unsigned integer")
        if self.max_rejections < 1:
            raise WorldError("max_rejections must be >= 1")


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, float, float]
    radius: float


@dataclass(frozen=True, eq=False)
class World:
    length: float
    width: float
    height: float
    centers: np.ndarray  # (n, 3)
    radii: np.ndarray  # (n,)
    start_position: np.ndarray
    start_yaw: float
    goal: np.ndarray
    spec: WorldSpec | None = field(default=None)

    @property
    def obstacles(self) -> list[Obstacle]:
        return [Obstacle(tuple(float(x) for x in c), float(r))
                for c, r in zip(self.centers, self.radii)]

    def __len__(self) -> int:
        return len(self.radii)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, World):
            return NotImplemented
        return (
            (self.length, self.width, self.height, self.start_yaw, self.spec)
            == (other.length, other.width, other.height, other.start_yaw, other.spec)
            and np.array_equal(self.centers, other.centers)
            and np.array_equal(self.radii, other.radii)
            and np.array_equal(self.start_position, other.start_position)
            and np.array_equal(self.goal, other.goal)
        )

    def to_dict(self) -> dict:
        return {
            "version": WORLD_SCHEMA_VERSION,
            "bounds": {"length": self.length, "width": self.width, "height": self.height},
            "obstacles": [{"center": [float(x) for x in c], "radius": float(r)}
                          for c, r in zip(self.centers, self.radii)],
            "start": {"position": [float(x) for x in self.start_position], "yaw": self.start_yaw},
            "goal": [float(x) for x in self.goal],
            "spec": asdict(self.spec) if self.spec is not None else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "World":
        if data.get("version") != WORLD_SCHEMA_VERSION:
            raise WorldError(f"unsupported world schema version {data.get('version')!r}")
        obstacles = data["obstacles"]
        centers = np.array([o["center"] for o in obstacles], dtype=float).reshape(-1, 3)
        radii = np.array([o["radius"] for o in obstacles], dtype=float)
        bounds = data["bounds"]
        spec = WorldSpec(**data["spec"]) if data.get("spec") else None
        return cls(
            length=float(bounds["length"]),
            width=float(bounds["width"]),
            height=float(bounds["height"]),
            centers=centers,
            radii=radii,
            start_position=np.array(data["start"]["position"], dtype=float),
            start_yaw=float(data["start"]["yaw"]),
            goal=np.array(data["goal"], dtype=float),
            spec=spec,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "World":
        return cls.from_dict(json.loads(Path(path).read_text()))


def empty_world(length: float = 40.0, width: float = 8.0, height: float = 8.0) -> World:
    """Corridor with no obstacles; start and goal on the centerline."""
    return World(
        length=length, width=width, height=height,
        centers=np.zeros((0, 3)), radii=np.zeros(0),
        start_position=np.array([0.0, width / 2, height / 2]), start_yaw=0.0,
        goal=np.array([length, width / 2, height / 2]),
    )


def generate_world(spec: WorldSpec, batch: int = 512) -> World:
    """Dart-throwing Poisson-disc placement of spherical obstacles.

    Candidates are drawn uniformly over the admissible center box and tested in
    draw order; sampling stops after ``spec.max_rejections`` consecutive
    rejections. Candidates are drawn in batches purely for speed: the accepted
    set is the same as a one-at-a-time loop over the same random stream.
    """
    spec.validate()
    rng = np.random.default_rng(int(spec.seed))
    radius = spec.obstacle_diameter / 2
    lo = np.array([0.0, radius, radius])
    hi = np.array([spec.corridor_length, spec.corridor_width - radius,
                   spec.corridor_height - radius])
    start = np.array([0.0, spec.corridor_width / 2, spec.corridor_height / 2])
    goal = np.array([spec.corridor_length, spec.corridor_width / 2, spec.corridor_height / 2])
    r_sep2 = spec.r_sep**2

    placed: list[np.ndarray] = []
    tree = None
    rejections = 0
    while rejections < spec.max_rejections:
        cand = lo + rng.random((batch, 3)) * (hi - lo)
        ok = (np.sum((cand - start) ** 2, axis=1) >= spec.clear_radius_start**2) & (
            np.sum((cand - goal) ** 2, axis=1) >= spec.clear_radius_goal**2)
        if tree is not None:
            nearest, _ = tree.query(cand, k=1)
            ok &= nearest >= spec.r_sep
        fresh = np.empty((batch, 3))
        n_fresh = 0
        for i in range(batch):
            if ok[i] and (n_fresh == 0 or np.min(
                    np.sum((fresh[:n_fresh] - cand[i]) ** 2, axis=1)) >= r_sep2):
                fresh[n_fresh] = cand[i]
                n_fresh += 1
                rejections = 0
            else:
                rejections += 1
                if rejections >= spec.max_rejections:
                    break
        if n_fresh:
            placed.extend(fresh[:n_fresh])
            tree = cKDTree(np.array(placed))

    if not placed:
        raise WorldError("no obstacle could be placed; the world specification is degenerate")
    centers = np.array(placed)
    return World(
        length=spec.corridor_length, width=spec.corridor_width, height=spec.corridor_height,
        centers=centers, radii=np.full(len(centers), radius),
        start_position=start, start_yaw=0.0, goal=goal, spec=spec,
    )


def wall_distances(world: World, point) -> np.ndarray:
    y, z = point[1], point[2]
    return np.array([y, world.width - y, z, world.height - z])


def signed_distance(world: World, point) -> float:
    """Minimum over sphere-surface and wall-plane distances; negative inside."""
    p = np.asarray(point, dtype=float)
    d = float(np.min(wall_distances(world, p)))
    if len(world.radii):
        d = min(d, float(np.min(np.linalg.norm(world.centers - p, axis=1) - world.radii)))
    return d


def signed_distances(world: World, points) -> np.ndarray:
    """Vectorized :func:`signed_distance` over an (m, 3) array."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    walls = np.minimum.reduce([pts[:, 1], world.width - pts[:, 1],
                               pts[:, 2], world.height - pts[:, 2]])
    if not len(world.radii):
        return walls
    diff = pts[:, None, :] - world.centers[None, :, :]
    spheres = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)) - world.radii
    return np.minimum(walls, spheres.min(axis=1))


def _sphere_hit(ox, oy, oz, dx, dy, dz, cx, cy, cz, r):
    # Same expression order as the batched scan kernel.
    lx = cx - ox
    ly = cy - oy
    lz = cz - oz
    b = dx * lx + dy * ly + dz * lz
    c = lx * lx + ly * ly + lz * lz - r * r
    disc = b * b - c
    if disc < 0.0:
        return math.inf
    sq = math.sqrt(disc)
    if c > 0.0:
        if b <= 0.0:
            return math.inf
        return c / (b + sq)
    return b + sq


def _plane_hit(o, d, plane):
    if d == 0.0:
        return math.inf
    t = (plane - o) / d
    return t if t >= 0.0 else math.inf


def ray_cast(world: World, origin, direction, max_range: float) -> float | None:
    """Distance to the first obstacle or wall surface along a unit ray.

    Returns ``None`` when nothing is hit within ``max_range``.
    """
    ox, oy, oz = (float(v) for v in origin)
    dx, dy, dz = (float(v) for v in direction)
    norm = math.sqrt(dx * dx + dy * dy + dz * dz)
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"ray direction must be unit length (|d| = {norm!r})")
    best = min(_plane_hit(oy, dy, 0.0), _plane_hit(oy, dy, world.width),
               _plane_hit(oz, dz, 0.0), _plane_hit(oz, dz, world.height))
    for (cx, cy, cz), r in zip(world.centers.tolist(), world.radii.tolist()):
        t = _sphere_hit(ox, oy, oz, dx, dy, dz, cx, cy, cz, r)
        if t < best:
            best = t
    return best if best <= max_range else None
