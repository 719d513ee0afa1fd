"""Egocentric LiDAR, a 2.5-D column-raycast camera, and local occupancy maps.

All sensors share one exact ray caster: grid traversal (Amanatides-Woo DDA)
against wall pixels, plus slab intersection against opponent rectangles.
Space outside the map is empty to the sensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .track import Footprint, TrackMap

N_BEAMS = 1080
LIDAR_FOV = math.radians(270.0)
MAX_RANGE = 15.0
IMAGE_SIZE = 64
CAMERA_FOV = math.radians(90.0)
CAMERA_HEIGHT = 0.15
WALL_HEIGHT = 0.5
LOCAL_CELLS = 64
LOCAL_EXTENT = 8.0

WALL_RGB = np.array([0.5, 0.5, 0.5])
OPPONENT_RGB = np.array([0.9, 0.1, 0.1])
FLOOR_RGB = np.array([0.15, 0.15, 0.15])
SKY_RGB = np.array([0.8, 0.85, 0.9])

TAGS = ("ego", "opponent-red", "wall")


@dataclass(frozen=True)
class WorldScene:
    """A map plus tagged footprints; exactly one carries the ``ego`` tag."""

    map: TrackMap
    agents: tuple = ()

    def __post_init__(self):
        agents = tuple(self.agents)
        object.__setattr__(self, "agents", agents)
        n_ego = sum(tag == "ego" for _, tag in agents)
        if n_ego != 1:
            raise ValueError(f"scene must contain exactly one ego, found {n_ego}")
        for _, tag in agents:
            if tag not in TAGS:
                raise ValueError(f"unknown agent tag {tag!r}")

    @property
    def ego(self) -> Footprint:
        return next(fp for fp, tag in self.agents if tag == "ego")

    def obstacles(self) -> list[Footprint]:
        return [fp for fp, tag in self.agents if tag != "ego"]


@dataclass
class ObservationBundle:
    lidar: np.ndarray
    image: np.ndarray
    local_map: np.ndarray | None = None
    lidar_tick: int = 0
    image_tick: int = 0

    def __post_init__(self):
        if self.lidar.shape != (N_BEAMS,):
            raise ValueError(f"lidar must have {N_BEAMS} ranges, got {self.lidar.shape}")
        if self.image.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise ValueError(f"image must be 64x64x3, got {self.image.shape}")


def beam_angles(n: int = N_BEAMS, fov: float = LIDAR_FOV) -> np.ndarray:
    """Beam 0 at -fov/2 relative to heading, counter-clockwise to +fov/2."""
    return np.linspace(-fov / 2, fov / 2, n)


def camera_column_angles(n: int = IMAGE_SIZE, fov: float = CAMERA_FOV) -> np.ndarray:
    """Pinhole column angles, column 0 on the left (+angle)."""
    u = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    return -np.arctan(u * math.tan(fov / 2))


def _rects_array(rects: Sequence[Footprint]) -> np.ndarray:
    if not rects:
        return np.zeros((0, 5))
    return np.array([[r.x, r.y, r.yaw, r.length / 2, r.width / 2] for r in rects], dtype=np.float64)


@numba.njit(cache=True)
def _cast_grid(grid, res, ox, oy, dx, dy, max_range):
    h, w = grid.shape
    ci = int(math.floor(oy / res))
    cj = int(math.floor(ox / res))
    if 0 <= ci < h and 0 <= cj < w and grid[ci, cj]:
        return 0.0
    if dx > 0:
        step_j = 1
        t_max_x = ((cj + 1) * res - ox) / dx
        t_dx = res / dx
    elif dx < 0:
        step_j = -1
        t_max_x = (cj * res - ox) / dx
        t_dx = -res / dx
    else:
        step_j = 0
        t_max_x = np.inf
        t_dx = np.inf
    if dy > 0:
        step_i = 1
        t_max_y = ((ci + 1) * res - oy) / dy
        t_dy = res / dy
    elif dy < 0:
        step_i = -1
        t_max_y = (ci * res - oy) / dy
        t_dy = -res / dy
    else:
        step_i = 0
        t_max_y = np.inf
        t_dy = np.inf
    while True:
        if t_max_x < t_max_y:
            t = t_max_x
            t_max_x += t_dx
            cj += step_j
        else:
            t = t_max_y
            t_max_y += t_dy
            ci += step_i
        if t >= max_range:
            return max_range
        if 0 <= ci < h and 0 <= cj < w:
            if grid[ci, cj]:
                return t
        else:
            # rays that left the map never come back
            if (step_i > 0 and ci >= h) or (step_i < 0 and ci < 0) or (step_j > 0 and cj >= w) or (step_j < 0 and cj < 0):
                return max_range


@numba.njit(cache=True)
def _cast_rects(rects, ox, oy, dx, dy, best):
    hit = -1
    for k in range(rects.shape[0]):
        cx, cy, yaw, hl, hw = rects[k, 0], rects[k, 1], rects[k, 2], rects[k, 3], rects[k, 4]
        c, s = math.cos(yaw), math.sin(yaw)
        # ray in rectangle frame
        px, py = (ox - cx) * c + (oy - cy) * s, -(ox - cx) * s + (oy - cy) * c
        vx, vy = dx * c + dy * s, -dx * s + dy * c
        t0, t1 = -np.inf, np.inf
        ok = True
        for p, v, e in ((px, vx, hl), (py, vy, hw)):
            if v == 0.0:
                if abs(p) > e:
                    ok = False
            else:
                a, b = (-e - p) / v, (e - p) / v
                if a > b:
                    a, b = b, a
                t0 = max(t0, a)
                t1 = min(t1, b)
        if not ok or t1 < max(t0, 0.0):
            continue
        t = max(t0, 0.0)
        if t < best:
            best = t
            hit = k
    return best, hit


@numba.njit(cache=True)
def _cast_many(grid, res, rects, ox, oy, angles, max_range, out_dist, out_tag):
    for b in range(angles.shape[0]):
        dx, dy = math.cos(angles[b]), math.sin(angles[b])
        d = _cast_grid(grid, res, ox, oy, dx, dy, max_range)
        tag = 0 if d < max_range else -1
        d2, k = _cast_rects(rects, ox, oy, dx, dy, d)
        if k >= 0:
            d = d2
            tag = 1
        out_dist[b] = d
        out_tag[b] = tag


def cast_rays(track: TrackMap, origin, angles: np.ndarray, rects: Sequence[Footprint] = (),
              max_range: float = MAX_RANGE) -> tuple[np.ndarray, np.ndarray]:
    """World-frame ray distances and hit tags (-1 none, 0 wall, 1 opponent)."""
    angles = np.ascontiguousarray(angles, dtype=np.float64)
    dist = np.empty(len(angles))
    tags = np.empty(len(angles), dtype=np.int64)
    _cast_many(np.ascontiguousarray(track.grid), float(track.resolution), _rects_array(list(rects)),
               float(origin[0]), float(origin[1]), angles, float(max_range), dist, tags)
    return dist, tags


def lidar_scan(scene: WorldScene, pose) -> np.ndarray:
    """1080 ranges over 270 degrees, clipped to [0, 15] m."""
    x, y, yaw = pose
    dist, _ = cast_rays(scene.map, (x, y), beam_angles() + yaw, scene.obstacles())
    return np.clip(dist, 0.0, MAX_RANGE)


def camera_column_depths(scene: WorldScene, pose) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean hit distance and tag per image column."""
    x, y, yaw = pose
    return cast_rays(scene.map, (x, y), camera_column_angles() + yaw, scene.obstacles())


def render_camera(scene: WorldScene, pose) -> np.ndarray:
    """64x64x3 image in [0, 1]: sky, floor, and depth-scaled wall/opponent slices."""
    dist, tags = camera_column_depths(scene, pose)
    rel = camera_column_angles()
    n = IMAGE_SIZE
    focal = (n / 2) / math.tan(CAMERA_FOV / 2)
    horizon = (n - 1) / 2
    rows = np.arange(n)[:, None]
    img = np.where(rows[..., None] < horizon, SKY_RGB, FLOOR_RGB) * np.ones((n, n, 3))
    perp = np.maximum(dist * np.cos(rel), 1e-3)
    top = horizon - focal * (WALL_HEIGHT - CAMERA_HEIGHT) / perp
    bottom = horizon + focal * CAMERA_HEIGHT / perp
    visible = tags >= 0
    inside = (rows >= np.floor(top)) & (rows <= np.ceil(bottom)) & visible[None, :]
    shade = 1.0 - 0.4 * np.clip(dist / MAX_RANGE, 0.0, 1.0)
    wall = WALL_RGB[None, :] * shade[:, None]
    colors = np.where((tags == 1)[:, None], OPPONENT_RGB[None, :], wall)
    img = np.where(inside[..., None], colors[None, :, :], img)
    return img


def local_occupancy(scene: WorldScene, pose, extent: float = LOCAL_EXTENT, cells: int = LOCAL_CELLS) -> np.ndarray:
    """Ego-centered, ego-aligned binary grid; row 0 is ahead, column 0 is left."""
    if not extent > 0:
        raise ValueError("extent must be positive")
    x, y, yaw = pose
    cs = extent / cells
    k = (cells / 2 - 0.5 - np.arange(cells)) * cs
    fwd, left = np.meshgrid(k, k, indexing="ij")  # fwd varies by row, left by column
    c, s = math.cos(yaw), math.sin(yaw)
    wx = x + fwd * c - left * s
    wy = y + fwd * s + left * c
    track = scene.map
    i, j = track.world_to_cell(wx, wy)
    ok = track.in_bounds(i, j)
    occ = np.zeros((cells, cells), dtype=bool)
    occ[ok] = track.grid[i[ok], j[ok]]
    pts = np.column_stack([wx.ravel(), wy.ravel()])
    for fp in scene.obstacles():
        occ |= fp.contains(pts).reshape(cells, cells)
    return occ


def observe(scene: WorldScene, pose, with_local_map: bool = False, extent: float = LOCAL_EXTENT) -> ObservationBundle:
    return ObservationBundle(
        lidar=lidar_scan(scene, pose),
        image=render_camera(scene, pose),
        local_map=local_occupancy(scene, pose, extent) if with_local_map else None,
    )


def dump_observation(obs: ObservationBundle, directory, stem: str = "obs") -> dict:
    """Write lidar as a CSV row, image as binary PPM, local map as PGM."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"lidar": d / f"{stem}_lidar.csv", "image": d / f"{stem}_image.ppm"}
    paths["lidar"].write_text(",".join(f"{v:.6f}" for v in obs.lidar) + "\n")
    rgb = np.clip(np.round(obs.image * 255), 0, 255).astype(np.uint8)
    paths["image"].write_bytes(f"P6\n{IMAGE_SIZE} {IMAGE_SIZE}\n255\n".encode() + rgb.tobytes())
    if obs.local_map is not None:
        paths["local_map"] = d / f"{stem}_local.pgm"
        h, w = obs.local_map.shape
        pix = np.where(obs.local_map, 0, 255).astype(np.uint8)
        paths["local_map"].write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())
    return paths
