"""Ray-cast dome range sensor, min-pooled inverse-range images and point sparsification."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numba
import numpy as np

from .world import World


@dataclass(frozen=True)
class SensorConfig:
    azimuth_span: float = 360.0
    elevation_min: float = -90.0
    elevation_max: float = 90.0
    azimuth_rays: int = 160
    elevation_rays: int = 80
    max_range: float = 20.0
    rate: float = 10.0
    pooled_shape: tuple[int, int] = (16, 20)
    voxel: float = 0.2
    range_noise: float = 0.0

    def validate(self) -> None:
        if self.azimuth_rays < 2 or self.elevation_rays < 2:
            raise ValueError("ray counts must be >= 2")
        if not (0 < self.azimuth_span <= 360):
            raise ValueError("azimuth_span must be in (0, 360]")
        if not (-90 <= self.elevation_min < self.elevation_max <= 90):
            raise ValueError("elevation span must be positive and within [-90, 90]")
        if not self.max_range > 0:
            raise ValueError("max_range must be > 0")
        if not (self.rate > 0 and self.voxel > 0 and self.range_noise >= 0):
            raise ValueError("rate and voxel must be > 0, range_noise >= 0")
        rows, cols = self.pooled_shape
        if self.azimuth_rays % rows or self.elevation_rays % cols:
            raise ValueError(
                f"raster {self.azimuth_rays}x{self.elevation_rays} is not divisible "
                f"into {rows}x{cols} pooling tiles")

    @property
    def wraps(self) -> bool:
        return self.azimuth_span >= 360.0


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    yaw: float = 0.0


@lru_cache(maxsize=16)
def ray_angles(cfg: SensorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Azimuth and elevation of each ray (radians), sampled at cell centers."""
    span = math.radians(cfg.azimuth_span)
    az = -span / 2 + (np.arange(cfg.azimuth_rays) + 0.5) * span / cfg.azimuth_rays
    el_lo, el_hi = math.radians(cfg.elevation_min), math.radians(cfg.elevation_max)
    el = el_lo + (np.arange(cfg.elevation_rays) + 0.5) * (el_hi - el_lo) / cfg.elevation_rays
    return az, el


@lru_cache(maxsize=16)
def sensor_directions(cfg: SensorConfig) -> np.ndarray:
    """Unit ray directions in the sensor frame, shape (azimuth_rays, elevation_rays, 3)."""
    az, el = ray_angles(cfg)
    a, e = np.meshgrid(az, el, indexing="ij")
    dirs = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
    dirs.setflags(write=False)
    return dirs


def rotate_yaw(vectors: np.ndarray, yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    out = np.empty_like(vectors)
    out[..., 0] = c * vectors[..., 0] - s * vectors[..., 1]
    out[..., 1] = s * vectors[..., 0] + c * vectors[..., 1]
    out[..., 2] = vectors[..., 2]
    return out


def world_directions(cfg: SensorConfig, yaw: float) -> np.ndarray:
    return rotate_yaw(sensor_directions(cfg), yaw)


@dataclass(frozen=True, eq=False)
class RangeScan:
    raster: np.ndarray  # (azimuth_rays, elevation_rays), inf for no return
    position: np.ndarray
    yaw: float
    timestamp: float
    config: SensorConfig

    def sensor_points(self) -> np.ndarray:
        """Finite returns as sensor-frame vectors, shape (k, 3)."""
        mask = np.isfinite(self.raster)
        return sensor_directions(self.config)[mask] * self.raster[mask][:, None]

    def to_dict(self) -> dict:
        return {
            "raster": [[None if not math.isfinite(r) else r for r in row]
                       for row in self.raster.tolist()],
            "position": self.position.tolist(),
            "yaw": self.yaw,
            "timestamp": self.timestamp,
            "config": asdict(self.config),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RangeScan":
        cfg = dict(data["config"])
        cfg["pooled_shape"] = tuple(cfg["pooled_shape"])
        raster = np.array([[math.inf if r is None else r for r in row] for row in data["raster"]],
                          dtype=float)
        return cls(raster, np.array(data["position"], dtype=float), float(data["yaw"]),
                   float(data["timestamp"]), SensorConfig(**cfg))


@dataclass(frozen=True, eq=False)
class PointSet:
    points: np.ndarray  # (k, 3) world frame
    ranges: np.ndarray | None = None
    position: np.ndarray | None = None
    yaw: float = 0.0

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_points(cls, points) -> "PointSet":
        return cls(np.asarray(points, dtype=float).reshape(-1, 3))

    @classmethod
    def empty(cls) -> "PointSet":
        return cls(np.zeros((0, 3)))

    def sensor_frame(self) -> np.ndarray:
        if self.position is None:
            raise ValueError("point set carries no capture pose")
        return rotate_yaw(self.points - self.position, -self.yaw)

    def to_dict(self) -> dict:
        return {
            "points": self.points.tolist(),
            "ranges": None if self.ranges is None else self.ranges.tolist(),
            "position": None if self.position is None else self.position.tolist(),
            "yaw": self.yaw,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PointSet":
        def arr(key):
            return None if data.get(key) is None else np.array(data[key], dtype=float)
        return cls(np.array(data["points"], dtype=float).reshape(-1, 3), arr("ranges"),
                   arr("position"), float(data.get("yaw", 0.0)))


@numba.njit(cache=True)
def _scan_kernel(origin, yaw, dirs, az0, daz, el0, del_, wraps, centers, radii,
                 width, height, max_range):
    n_az, n_el = dirs.shape[0], dirs.shape[1]
    ox, oy, oz = origin[0], origin[1], origin[2]
    out = np.empty((n_az, n_el))
    planes_y = (0.0, width)
    planes_z = (0.0, height)
    for i in range(n_az):
        for j in range(n_el):
            best = np.inf
            dy = dirs[i, j, 1]
            dz = dirs[i, j, 2]
            if dy != 0.0:
                for k in range(2):
                    t = (planes_y[k] - oy) / dy
                    if t >= 0.0 and t < best:
                        best = t
            if dz != 0.0:
                for k in range(2):
                    t = (planes_z[k] - oz) / dz
                    if t >= 0.0 and t < best:
                        best = t
            out[i, j] = best

    half_pi = 0.5 * np.pi
    for s in range(radii.shape[0]):
        cx, cy, cz, r = centers[s, 0], centers[s, 1], centers[s, 2], radii[s]
        lx = cx - ox
        ly = cy - oy
        lz = cz - oz
        dist = np.sqrt(lx * lx + ly * ly + lz * lz)
        if dist - r > max_range:
            continue
        # Angular window of rays that can intersect this sphere, padded by two cells.
        i_lo, i_hi, j_lo, j_hi = 0, n_az - 1, 0, n_el - 1
        full_az = True
        if dist > r * (1.0 + 1e-9):
            beta = np.arcsin(r / dist)
            el_c = np.arctan2(lz, np.sqrt(lx * lx + ly * ly))
            j_lo = max(int(np.floor((el_c - beta - el0) / del_ - 0.5)) - 2, 0)
            j_hi = min(int(np.ceil((el_c + beta - el0) / del_ - 0.5)) + 2, n_el - 1)
            if abs(el_c) + beta < half_pi - 1e-6:
                half = np.arcsin(min(1.0, np.sin(beta) / np.cos(el_c)))
                az_c = np.arctan2(ly, lx) - yaw
                az_c = (az_c + np.pi) % (2.0 * np.pi) - np.pi
                i_lo = int(np.floor((az_c - half - az0) / daz - 0.5)) - 2
                i_hi = int(np.ceil((az_c + half - az0) / daz - 0.5)) + 2
                full_az = i_hi - i_lo + 1 >= n_az
                if not wraps and not full_az:
                    i_lo = max(i_lo, 0)
                    i_hi = min(i_hi, n_az - 1)
        if full_az:
            i_lo, i_hi = 0, n_az - 1
        for ii in range(i_lo, i_hi + 1):
            i = ii % n_az
            for j in range(j_lo, j_hi + 1):
                dx = dirs[i, j, 0]
                dy = dirs[i, j, 1]
                dz = dirs[i, j, 2]
                b = dx * lx + dy * ly + dz * lz
                c = lx * lx + ly * ly + lz * lz - r * r
                disc = b * b - c
                if disc < 0.0:
                    continue
                sq = np.sqrt(disc)
                if c > 0.0:
                    if b <= 0.0:
                        continue
                    t = c / (b + sq)
                else:
                    t = b + sq
                if t < out[i, j]:
                    out[i, j] = t

    for i in range(n_az):
        for j in range(n_el):
            if out[i, j] > max_range:
                out[i, j] = np.inf
    return out


def scan(world: World, pose: Pose, cfg: SensorConfig, timestamp: float = 0.0,
         rng: np.random.Generator | None = None) -> RangeScan:
    """Cast every dome ray from ``pose`` into ``world``."""
    position = np.asarray(pose.position, dtype=float)
    dirs = world_directions(cfg, pose.yaw)
    az, el = ray_angles(cfg)
    raster = _scan_kernel(
        position, float(pose.yaw), dirs,
        float(az[0] - 0.5 * (az[1] - az[0])), float(az[1] - az[0]),
        float(el[0] - 0.5 * (el[1] - el[0])), float(el[1] - el[0]),
        cfg.wraps, world.centers, world.radii,
        float(world.width), float(world.height), float(cfg.max_range))
    if cfg.range_noise > 0 and rng is not None:
        finite = np.isfinite(raster)
        noisy = raster[finite] + rng.normal(0.0, cfg.range_noise, finite.sum())
        raster[finite] = np.clip(noisy, 1e-6, cfg.max_range)
    return RangeScan(raster, position.copy(), float(pose.yaw), float(timestamp), cfg)


def min_pool_invert(scan: RangeScan) -> np.ndarray:
    """Tile-wise minimum range, inverted; tiles with no return map to 1/max_range."""
    cfg = scan.config
    rows, cols = cfg.pooled_shape
    n_az, n_el = scan.raster.shape
    if n_az % rows or n_el % cols:
        raise ValueError(f"raster {n_az}x{n_el} not divisible into {rows}x{cols} tiles")
    tiles = scan.raster.reshape(rows, n_az // rows, cols, n_el // cols)
    nearest = tiles.min(axis=(1, 3))
    return np.where(np.isfinite(nearest), 1.0 / nearest, 1.0 / cfg.max_range)


_KEY_OFFSET = 1 << 20


def sparsify(scan: RangeScan, n_max: int, voxel: float) -> PointSet:
    """Voxel-downsample the finite returns, then keep the ``n_max`` nearest.

    Each occupied voxel contributes the return closest to the centroid of its
    returns, except that the voxel holding the globally nearest return is always
    represented by that return. Ordering everywhere is by (range, azimuth index,
    elevation index).
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    az_idx, el_idx = np.nonzero(np.isfinite(scan.raster))
    if len(az_idx) == 0:
        return PointSet(np.zeros((0, 3)), np.zeros(0), scan.position.copy(), scan.yaw)
    ranges = scan.raster[az_idx, el_idx]
    # np.nonzero is already (az, el) lexicographic, so a stable sort on range
    # yields the (range, az, el) order.
    order = np.argsort(ranges, kind="stable")
    az_idx, el_idx, ranges = az_idx[order], el_idx[order], ranges[order]
    dirs = world_directions(scan.config, scan.yaw)[az_idx, el_idx]
    points = scan.position + dirs * ranges[:, None]

    # A representative lies at most one voxel diagonal beyond its voxel's nearest
    # return, so voxels first reached past (range at which the n_max-th distinct
    # voxel appears) + diagonal cannot make the cut, and a further diagonal of
    # slack keeps every surviving voxel's returns complete.
    r_star = _range_of_nth_voxel(points, ranges, voxel, n_max)
    cut = np.searchsorted(ranges, r_star + 2.0 * math.sqrt(3.0) * voxel, side="right")
    points, ranges = points[:cut], ranges[:cut]
    reps = _voxel_representatives(points, voxel)[:n_max]
    return PointSet(points[reps], ranges[reps], scan.position.copy(), scan.yaw)


@numba.njit(cache=True)
def _voxel_key(x, y, z, voxel):
    cx = np.int64(np.floor(x / voxel)) + _KEY_OFFSET
    cy = np.int64(np.floor(y / voxel)) + _KEY_OFFSET
    cz = np.int64(np.floor(z / voxel)) + _KEY_OFFSET
    return (cx << 42) | (cy << 21) | cz


@numba.njit(cache=True)
def _range_of_nth_voxel(points, ranges, voxel, n):
    seen = set()
    for k in range(points.shape[0]):
        seen.add(_voxel_key(points[k, 0], points[k, 1], points[k, 2], voxel))
        if len(seen) >= n:
            return ranges[k]
    return np.inf


@numba.njit(cache=True)
def _voxel_representatives(points, voxel):
    """Indices (ascending) of one representative per occupied voxel."""
    n = points.shape[0]
    keys = np.empty(n, dtype=np.int64)
    for k in range(n):
        keys[k] = _voxel_key(points[k, 0], points[k, 1], points[k, 2], voxel)
    grouped = np.argsort(keys, kind="mergesort")
    reps = np.empty(n, dtype=np.int64)
    n_reps = 0
    start = 0
    while start < n:
        stop = start + 1
        while stop < n and keys[grouped[stop]] == keys[grouped[start]]:
            stop += 1
        sx = sy = sz = 0.0
        for m in range(start, stop):
            q = grouped[m]
            sx += points[q, 0]
            sy += points[q, 1]
            sz += points[q, 2]
        count = stop - start
        mx, my, mz = sx / count, sy / count, sz / count
        best = -1
        best_d2 = np.inf
        # Stable sort keeps input order within a voxel, so strict < breaks ties
        # toward the earlier (nearer) return.
        for m in range(start, stop):
            q = grouped[m]
            d2 = (points[q, 0] - mx) ** 2 + (points[q, 1] - my) ** 2 + (points[q, 2] - mz) ** 2
            if d2 < best_d2:
                best_d2 = d2
                best = q
        # The globally nearest return (index 0) always represents its voxel.
        if grouped[start] == 0:
            best = 0
        reps[n_reps] = best
        n_reps += 1
        start = stop
    return np.sort(reps[:n_reps])
