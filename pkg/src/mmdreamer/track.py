"""Occupancy-grid race tracks: loading, progress field, waypoints, collisions.

Grid convention: ``grid[i, j]`` covers ``x in [j*res, (j+1)*res)`` and
``y in [i*res, (i+1)*res)``, so row 0 is at ``y = 0``.  Image files store the
top row first and are flipped on load.  ``True`` means occupied.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import FormatError, ParameterError, PlacementError, QueryError, TopologyError

DATA_DIR = Path(__file__).parent / "data"
META_KEYS = ("resolution_m_per_px", "occupied_threshold", "start_x_m", "start_y_m", "start_yaw_rad", "direction")

_NEIGHBORS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass(frozen=True)
class Footprint:
    """Oriented rectangle: center (x, y) in meters, yaw in radians, full length and width."""

    x: float
    y: float
    yaw: float
    length: float = 0.5
    width: float = 0.3

    def corners(self) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        hl, hw = self.length / 2, self.width / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])

    def axes(self) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, s], [-s, c]])

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """Boolean mask of points (n, 2) inside the rectangle."""
        d = np.asarray(pts, dtype=float) - np.array([self.x, self.y])
        ax = self.axes()
        return (np.abs(d @ ax[0]) <= self.length / 2) & (np.abs(d @ ax[1]) <= self.width / 2)


@dataclass(frozen=True)
class TrackMap:
    grid: np.ndarray
    resolution: float
    start_pose: tuple[float, float, float]
    progress: np.ndarray = field(repr=False)
    centerline: np.ndarray = field(repr=False)
    clearance: np.ndarray = field(repr=False)
    loop_length: float = 0.0
    direction: str = "ccw"
    name: str = "track"

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def free(self) -> np.ndarray:
        return ~self.grid

    def world_to_cell(self, x, y):
        return (np.floor(np.asarray(y) / self.resolution).astype(int),
                np.floor(np.asarray(x) / self.resolution).astype(int))

    def cell_center(self, i, j):
        return ((np.asarray(j) + 0.5) * self.resolution, (np.asarray(i) + 0.5) * self.resolution)

    def in_bounds(self, i, j):
        h, w = self.grid.shape
        return (i >= 0) & (i < h) & (j >= 0) & (j < w)

    def is_free_point(self, x: float, y: float) -> bool:
        i, j = self.world_to_cell(x, y)
        return bool(self.in_bounds(i, j) and not self.grid[i, j])


# ------------------------------------------------------------------ loading

def read_metadata(path) -> dict:
    """Parse a flat ``key: value`` (or ``key = value``) text file."""
    meta = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = ":" if ":" in line else "="
        if sep not in line:
            raise FormatError(f"malformed metadata line: {raw!r}")
        key, val = (s.strip() for s in line.split(sep, 1))
        meta[key] = val
    missing = [k for k in META_KEYS if k not in meta]
    if missing:
        raise FormatError(f"metadata missing keys: {missing}")
    try:
        out = {
            "resolution_m_per_px": float(meta["resolution_m_per_px"]),
            "occupied_threshold": float(meta["occupied_threshold"]),
            "start_x_m": float(meta["start_x_m"]),
            "start_y_m": float(meta["start_y_m"]),
            "start_yaw_rad": float(meta["start_yaw_rad"]),
            "direction": meta["direction"].lower(),
        }
    except ValueError as exc:
        raise FormatError(f"bad metadata value: {exc}") from None
    if out["direction"] not in ("cw", "ccw"):
        raise FormatError(f"direction must be cw or ccw, got {out['direction']!r}")
    if not out["resolution_m_per_px"] > 0:
        raise FormatError("resolution_m_per_px must be positive")
    return out


def load_track(image_path, metadata_path, name: str | None = None) -> TrackMap:
    """Load an 8-bit grayscale PGM/PNG map plus its metadata file."""
    from PIL import Image

    meta = read_metadata(metadata_path)
    with Image.open(image_path) as img:
        if img.mode not in ("L", "P", "1", "I;16", "I"):
            img = img.convert("L")
        pix = np.asarray(img.convert("L"), dtype=np.uint8)
    grid = np.flipud(pix < meta["occupied_threshold"]).copy()
    start = (meta["start_x_m"], meta["start_y_m"], meta["start_yaw_rad"])
    return build_track(grid, meta["resolution_m_per_px"], start, meta["direction"],
                       name=name or Path(image_path).stem)


def save_track(track_or_grid, resolution: float, start_pose, direction: str, image_path, metadata_path,
               threshold: int = 128) -> None:
    """Write a grid as an 8-bit PGM/PNG (white = free) plus a metadata file."""
    from PIL import Image

    grid = track_or_grid.grid if isinstance(track_or_grid, TrackMap) else np.asarray(track_or_grid, bool)
    pix = np.where(np.flipud(grid), 0, 254).astype(np.uint8)
    Image.fromarray(pix, mode="L").save(image_path)
    Path(metadata_path).write_text(
        f"resolution_m_per_px: {resolution}\n"
        f"occupied_threshold: {threshold}\n"
        f"start_x_m: {start_pose[0]}\n"
        f"start_y_m: {start_pose[1]}\n"
        f"start_yaw_rad: {start_pose[2]}\n"
        f"direction: {direction}\n"
    )


def build_track(grid: np.ndarray, resolution: float, start_pose, direction: str = "ccw",
                name: str = "track", waypoint_spacing: float = 0.25) -> TrackMap:
    """Validate topology and compute progress field, clearance and centerline."""
    grid = np.asarray(grid, dtype=bool)
    if not resolution > 0:
        raise ParameterError("resolution must be positive")
    x, y, yaw = (float(v) for v in start_pose)
    i, j = int(np.floor(y / resolution)), int(np.floor(x / resolution))
    h, w = grid.shape
    if not (0 <= i < h and 0 <= j < w) or grid[i, j]:
        raise PlacementError(f"start pose ({x:.2f}, {y:.2f}) is not on a free pixel")
    labels, n = ndimage.label(~grid, structure=np.ones((3, 3)))
    if n != 1:
        raise TopologyError(f"free space has {n} connected components, expected 1")
    progress, loop_length = compute_progress_field(grid, (x, y, yaw), direction, resolution)
    # the image border counts as wall for clearance
    padded = np.pad(~grid, 1, constant_values=False)
    clearance = ndimage.distance_transform_edt(padded)[1:-1, 1:-1] * resolution
    track = TrackMap(grid=grid, resolution=float(resolution), start_pose=(x, y, yaw), progress=progress,
                     centerline=np.zeros((0, 2)), clearance=clearance, loop_length=loop_length,
                     direction=direction, name=name)
    centerline = extract_centerline_waypoints(track, waypoint_spacing)
    object.__setattr__(track, "centerline", centerline)
    for arr in (grid, progress, clearance, centerline):
        arr.setflags(write=False)
    return track


# ---------------------------------------------------------------- progress

def _free_graph(free: np.ndarray, resolution: float, line: np.ndarray, behind: np.ndarray):
    """8-connected free-pixel graph with every line<->behind edge removed."""
    h, w = free.shape
    idx = -np.ones(free.shape, dtype=np.int64)
    n = int(free.sum())
    idx[free] = np.arange(n)
    fi, fj = np.nonzero(free)
    rows, cols, wts = [], [], []
    for di, dj in _NEIGHBORS:
        ni, nj = fi + di, fj + dj
        ok = (ni >= 0) & (ni < h) & (nj >= 0) & (nj < w)
        ok[ok] = free[ni[ok], nj[ok]]
        ui, uj, vi, vj = fi[ok], fj[ok], ni[ok], nj[ok]
        cut = (line[ui, uj] & behind[vi, vj]) | (behind[ui, uj] & line[vi, vj])
        rows.append(idx[ui, uj][~cut])
        cols.append(idx[vi, vj][~cut])
        wts.append(np.full(int((~cut).sum()), resolution * np.hypot(di, dj)))
    g = coo_matrix((np.concatenate(wts), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    return g, idx


def compute_progress_field(grid: np.ndarray, start_pose, direction: str = "ccw",
                           resolution: float = 0.05) -> tuple[np.ndarray, float]:
    """Geodesic progress in [0, 1) along the driving direction from the start line.

    The start line is the band of free pixels through the start pose,
    perpendicular to its heading and at most ~0.7 px thick, restricted to the
    corridor containing the start.  Edges from the line to the pixels behind
    it are cut, then a Dijkstra sweep (8-connected, diagonal weight sqrt 2)
    measures distance around the loop.  Values are normalized by the loop
    length measured through the widest point just behind the line; the few
    pixels beyond it (outer corners next to the line) saturate below 1.

    ``direction`` only documents the loop orientation; the heading of the
    start pose defines which side of the line is ahead.

    Returns ``(field, loop_length_m)``; occupied pixels hold ``nan``.
    """
    grid = np.asarray(grid, dtype=bool)
    free = ~grid
    x0, y0, yaw = start_pose
    h, w = grid.shape
    ii, jj = np.mgrid[0:h, 0:w]
    cx, cy = (jj + 0.5) * resolution, (ii + 0.5) * resolution
    s = (cx - x0) * np.cos(yaw) + (cy - y0) * np.sin(yaw)
    band = free & (np.abs(s) <= 0.71 * resolution)
    lab, _ = ndimage.label(band, structure=np.ones((3, 3)))
    si, sj = int(np.floor(y0 / resolution)), int(np.floor(x0 / resolution))
    # the start pixel may sit just outside the thin band
    cand = lab[max(si - 1, 0): si + 2, max(sj - 1, 0): sj + 2]
    cand = cand[cand > 0]
    if cand.size == 0:
        raise TopologyError("could not form a start line through the start pose")
    line = lab == np.bincount(cand).argmax()
    behind = free & (s < 0) & ~line
    g, idx = _free_graph(free, resolution, line, behind)
    sources = idx[line]
    dist = dijkstra(g, directed=True, indices=sources, min_only=True)
    field = np.full(grid.shape, np.nan)
    d = dist[idx[free]]
    if not np.all(np.isfinite(d)):
        raise TopologyError("start line does not close a loop (free space is not a ring)")
    # behind-line pixels must only be reachable the long way round
    near_behind = behind & ndimage.binary_dilation(line, structure=np.ones((3, 3)))
    if not near_behind.any():
        raise TopologyError("start line has no pixels behind it")
    nb_d = dist[idx[near_behind]]
    if np.min(nb_d) < 0.5 * float(d.max()):
        raise TopologyError("start line does not cut the loop")
    # loop length measured where the corridor is widest behind the line
    clear = ndimage.distance_transform_edt(np.pad(free, 1))[1:-1, 1:-1][near_behind]
    loop_length = float(nb_d[np.argmax(clear)] + resolution)
    field[free] = np.minimum(d / loop_length, np.nextafter(1.0, 0.0))
    return field, loop_length


def progress_at(track: TrackMap, position) -> float:
    x, y = position
    i, j = track.world_to_cell(x, y)
    if not track.in_bounds(i, j) or track.grid[i, j]:
        raise QueryError(f"position ({x:.3f}, {y:.3f}) is off-track")
    return float(track.progress[i, j])


def wrap_progress(dp):
    """Map a progress difference into (-0.5, 0.5]."""
    return -((-np.asarray(dp) + 0.5) % 1.0 - 0.5)


# ---------------------------------------------------------------- waypoints

def extract_centerline_waypoints(track: TrackMap, spacing: float = 0.25) -> np.ndarray:
    """Max-clearance point on each progress isoline, resampled at ``spacing`` meters."""
    if not spacing > 0 or spacing > track.loop_length:
        raise ParameterError(f"spacing {spacing} must lie in (0, loop length {track.loop_length:.2f}]")
    free = track.free
    prog = track.progress[free]
    clear = track.clearance[free]
    ii, jj = np.nonzero(free)
    nbins = max(int(round(track.loop_length / track.resolution)), 8)
    bins = np.minimum((prog * nbins).astype(int), nbins - 1)
    # argmax clearance per bin, ties broken by lowest flat index
    order = np.lexsort((-clear, bins))
    first = np.r_[True, bins[order][1:] != bins[order][:-1]]
    pick = order[first]
    pts = np.column_stack(track.cell_center(ii[pick], jj[pick]))
    # light circular smoothing of pixel jitter along the ridge
    k = 5
    ext = np.vstack([pts[-k:], pts, pts[:k]])
    kernel = np.ones(2 * k + 1) / (2 * k + 1)
    smooth = np.column_stack([np.convolve(ext[:, c], kernel, mode="valid") for c in range(2)])
    smooth[0] = pts[0]
    return _resample_closed(smooth, spacing)


def _resample_closed(pts: np.ndarray, spacing: float) -> np.ndarray:
    closed = np.vstack([pts, pts[:1]])
    seg = np.hypot(*np.diff(closed, axis=0).T)
    cum = np.r_[0.0, np.cumsum(seg)]
    total = cum[-1]
    n = max(int(round(total / spacing)), 3)
    t = np.arange(n) * (total / n)
    return np.column_stack([np.interp(t, cum, closed[:, 0]), np.interp(t, cum, closed[:, 1])])


def polyline_length(pts: np.ndarray, closed: bool = True) -> float:
    p = np.vstack([pts, pts[:1]]) if closed else pts
    return float(np.sum(np.hypot(*np.diff(p, axis=0).T)))


# ---------------------------------------------------------------- collision

def _rect_hits_cells(fp: Footprint, ci: np.ndarray, cj: np.ndarray, res: float) -> np.ndarray:
    cx, cy = (cj + 0.5) * res, (ci + 0.5) * res
    ax = fp.axes()
    d = np.column_stack([cx - fp.x, cy - fp.y])
    half = res / 2
    out = np.ones(len(ci), dtype=bool)
    for a, ext in ((ax[0], fp.length / 2), (ax[1], fp.width / 2)):
        out &= np.abs(d @ a) < ext + half * (abs(a[0]) + abs(a[1]))
    # world axes
    corners = fp.corners()
    out &= (cx + half > corners[:, 0].min()) & (cx - half < corners[:, 0].max())
    out &= (cy + half > corners[:, 1].min()) & (cy - half < corners[:, 1].max())
    return out


def footprints_overlap(a: Footprint, b: Footprint) -> bool:
    """Separating-axis test for two oriented rectangles (touching is not overlap)."""
    ca, cb = a.corners(), b.corners()
    for axis in np.vstack([a.axes(), b.axes()]):
        pa, pb = ca @ axis, cb @ axis
        if pa.max() <= pb.min() or pb.max() <= pa.min():
            return False
    return True


def footprint_hits_walls(track: TrackMap, fp: Footprint) -> bool:
    corners = fp.corners()
    res = track.resolution
    i0, j0 = track.world_to_cell(corners[:, 0].min(), corners[:, 1].min())
    i1, j1 = track.world_to_cell(corners[:, 0].max(), corners[:, 1].max())
    h, w = track.grid.shape
    if i0 < 0 or j0 < 0 or i1 >= h or j1 >= w:
        return True  # leaving the map counts as a crash
    sub = track.grid[i0 : i1 + 1, j0 : j1 + 1]
    if not sub.any():
        return False
    oi, oj = np.nonzero(sub)
    return bool(_rect_hits_cells(fp, oi + i0, oj + j0, res).any())


def is_collision(track: TrackMap, footprint: Footprint, others: Iterable[Footprint] = ()) -> bool:
    """True if the footprint touches an occupied pixel or overlaps another footprint."""
    if not (footprint.length > 0 and footprint.width > 0):
        raise ParameterError("footprint dimensions must be positive")
    if footprint_hits_walls(track, footprint):
        return True
    return any(footprints_overlap(footprint, o) for o in others)


# ---------------------------------------------------------------- fixtures

def corridor_grid(centerline: np.ndarray, width: float, resolution: float, margin: float = 0.5):
    """Rasterize a closed corridor of ``width`` around a centerline polyline.

    Returns ``(grid, offset)`` where ``offset`` was added to the centerline so
    the whole corridor sits ``margin`` meters inside the image.
    """
    lo = centerline.min(axis=0) - width / 2 - margin
    hi = centerline.max(axis=0) + width / 2 + margin
    pts = centerline - lo
    shape = np.ceil((hi - lo) / resolution).astype(int)
    w, h = int(shape[0]), int(shape[1])
    ii, jj = np.mgrid[0:h, 0:w]
    px, py = (jj + 0.5) * resolution, (ii + 0.5) * resolution
    dmin = np.full((h, w), np.inf)
    a = pts
    b = np.roll(pts, -1, axis=0)
    for (ax_, ay_), (bx_, by_) in zip(a, b):
        vx, vy = bx_ - ax_, by_ - ay_
        L2 = vx * vx + vy * vy
        t = np.clip(((px - ax_) * vx + (py - ay_) * vy) / L2, 0.0, 1.0) if L2 > 0 else 0.0
        d = np.hypot(px - (ax_ + t * vx), py - (ay_ + t * vy))
        np.minimum(dmin, d, out=dmin)
    grid = dmin > width / 2
    return grid, -lo


def stadium_centerline(straight: float, radius: float, n: int = 720) -> np.ndarray:
    """Counter-clockwise stadium starting at the middle of the bottom straight."""
    per = 2 * straight + 2 * np.pi * radius
    s = np.linspace(0.0, per, n, endpoint=False)
    out = np.empty((n, 2))
    half = straight / 2
    for k, d in enumerate(s):
        if d < half:
            out[k] = (d, -radius)
        elif d < half + np.pi * radius:
            a = -np.pi / 2 + (d - half) / radius
            out[k] = (half + radius * np.cos(a), radius * np.sin(a))
        elif d < half + np.pi * radius + straight:
            out[k] = (half - (d - half - np.pi * radius), radius)
        elif d < half + 2 * np.pi * radius + straight:
            a = np.pi / 2 + (d - half - np.pi * radius - straight) / radius
            out[k] = (-half + radius * np.cos(a), radius * np.sin(a))
        else:
            out[k] = (-half + (d - half - 2 * np.pi * radius - straight), -radius)
    return out


def make_oval_track(resolution: float = 0.05, width: float = 3.0, outer=(12.0, 8.0)) -> TrackMap:
    """Stadium-shaped loop whose outer wall spans ``outer`` meters, corridor ``width`` wide."""
    radius = outer[1] / 2 - width / 2
    straight = outer[0] - outer[1]
    cl = stadium_centerline(straight, radius)
    grid, off = corridor_grid(cl, width, resolution)
    start = (off[0], off[1] - radius, 0.0)
    return build_track(grid, resolution, start, "ccw", name="oval")


def scurve_centerline(n: int = 900) -> np.ndarray:
    """Closed loop whose top side is an S-shaped chicane."""
    th = np.linspace(0.0, 2 * np.pi, n, endpoint=False) - np.pi / 2
    x = 7.0 * np.cos(th)
    y = 4.5 * np.sin(th) + 1.4 * np.sin(np.pi * x / 3.5) * np.clip(np.sin(th), 0.0, None) ** 2
    return np.column_stack([x, y])


def make_scurve_track(resolution: float = 0.05, width: float = 2.5) -> TrackMap:
    cl = scurve_centerline()
    grid, off = corridor_grid(cl, width, resolution)
    p0, p1 = cl[0] + off, cl[1] + off
    yaw = float(np.arctan2(p1[1] - p0[1], p1[0] - p0[0]))
    return build_track(grid, resolution, (p0[0], p0[1], yaw), "ccw", name="scurve")


BUNDLED = ("oval", "scurve")


def bundled_track(name: str) -> TrackMap:
    """Load one of the shipped fixture tracks by name."""
    if name not in BUNDLED:
        raise FileNotFoundError(f"unknown bundled track {name!r}; choose from {BUNDLED}")
    return load_track(DATA_DIR / f"{name}.pgm", DATA_DIR / f"{name}.txt", name=name)


def resolve_track(spec: str) -> TrackMap:
    """A bundled name, or a path to an image with a sibling ``.txt`` metadata file."""
    if spec in BUNDLED:
        return bundled_track(spec)
    p = Path(spec)
    meta = p.with_suffix(".txt")
    if not p.exists() or not meta.exists():
        raise FileNotFoundError(f"track {spec!r}: need {p} and {meta}")
    return load_track(p, meta)


def write_bundled_tracks(directory=DATA_DIR) -> None:
    """Regenerate the shipped fixture files (PGM image + metadata)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for tr in (make_oval_track(), make_scurve_track()):
        save_track(tr, tr.resolution, tr.start_pose, tr.direction,
                   directory / f"{tr.name}.pgm", directory / f"{tr.name}.txt")
