"""Racing POMDP: reset/step with action repeat, rewards, obstacles and a rule-based opponent."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import sensors
from .errors import ParameterError, PlacementError, QueryError, StateError
from .track import Footprint, TrackMap, is_collision, progress_at, resolve_track, wrap_progress
from .vehicle import ActionCommand, VehicleParams, VehicleState, step_dynamics

MODES = ("single", "multi-static", "multi-dynamic")
LOG_COLUMNS = ("tick", "x", "y", "yaw", "speed", "steer_norm", "torque_norm", "reward", "progress", "collision", "done")


@dataclass(frozen=True)
class FollowerGains:
    kp: float = 1.2
    ki: float = 0.0
    kd: float = 0.1
    lookahead_m: float = 1.5
    speed: float = 3.0


@dataclass(frozen=True)
class EnvConfig:
    track: str = "oval"
    mode: str = "single"
    action_repeat: int = 4
    max_ticks: int = 2000
    obstacle_count: int | None = None
    seed: int = 0
    reward_mode: str = "single"
    progress_mode: str = "signed-wrapped"
    random_start: bool = True
    with_local_map: bool = False
    local_extent_m: float = sensors.LOCAL_EXTENT
    lidar_period_ticks: int = 4
    camera_period_ticks: int = 1
    car_length_m: float = 0.5
    car_width_m: float = 0.3
    opponent_gap_m: float = 3.0
    obstacle_spacing_m: float = 2.0
    obstacle_ego_clearance_m: float = 3.0
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    follower: FollowerGains = field(default_factory=FollowerGains)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}")
        if self.action_repeat < 1:
            raise ParameterError("action_repeat must be >= 1")
        if self.reward_mode not in ("single", "multi"):
            raise ParameterError("reward_mode must be single or multi")
        if self.progress_mode not in ("signed-wrapped", "paper-absolute"):
            raise ParameterError("progress_mode must be signed-wrapped or paper-absolute")

    @property
    def n_obstacles(self) -> int:
        if self.obstacle_count is not None:
            return self.obstacle_count
        return 5 if self.mode == "multi-static" else 0


@dataclass
class StepResult:
    obs: sensors.ObservationBundle
    reward: float
    done: bool
    info: dict


# ------------------------------------------------------------------ rewards

def reward_single(p_prev: float, p_now: float, collided: bool, progress_mode: str = "signed-wrapped") -> float:
    """Progress reward (x100) minus 1 on collision."""
    if progress_mode == "paper-absolute":
        r = 100.0 * abs(p_now - p_prev)
    else:
        r = 100.0 * float(wrap_progress(p_now - p_prev))
    return r - (1.0 if collided else 0.0)


def reward_multi(p_prev: float, p_now: float, collided: bool, steer_prev: float, steer_now: float,
                 progress_mode: str = "signed-wrapped") -> float:
    """Single-agent reward plus a -0.1 |delta steer| smoothness penalty."""
    return reward_single(p_prev, p_now, collided, progress_mode) - 0.1 * abs(steer_now - steer_prev)


# ---------------------------------------------------------------- follower

def _project_on_loop(pts: np.ndarray, pos: np.ndarray):
    b = np.roll(pts, -1, axis=0)
    seg = b - pts
    l2 = np.einsum("ij,ij->i", seg, seg)
    t = np.clip(np.einsum("ij,ij->i", pos - pts, seg) / np.where(l2 > 0, l2, 1.0), 0.0, 1.0)
    proj = pts + t[:, None] * seg
    d2 = np.einsum("ij,ij->i", proj - pos, proj - pos)
    k = int(np.argmin(d2))
    cum = np.r_[0.0, np.cumsum(np.sqrt(l2))]
    return k, cum[k] + t[k] * math.sqrt(l2[k]), cum


def lookahead_point(waypoints: np.ndarray, position, distance: float) -> np.ndarray:
    """Point ``distance`` meters further along the closed waypoint loop from the projection of ``position``."""
    pts = np.asarray(waypoints, dtype=float)
    _, s0, cum = _project_on_loop(pts, np.asarray(position, dtype=float))
    total = cum[-1]
    s = (s0 + distance) % total
    closed = np.vstack([pts, pts[:1]])
    return np.array([np.interp(s, cum, closed[:, 0]), np.interp(s, cum, closed[:, 1])])


def offset_waypoints(waypoints: np.ndarray, offset: float) -> np.ndarray:
    """Shift a closed loop laterally; positive offset moves to the left of travel."""
    pts = np.asarray(waypoints, dtype=float)
    tang = np.roll(pts, -1, axis=0) - np.roll(pts, 1, axis=0)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    normal = np.column_stack([-tang[:, 1], tang[:, 0]])
    return pts + offset * normal


class WaypointFollower:
    """Fixed-speed agent: lookahead target on the waypoint loop, PID on heading error.

    Sign convention: positive steer-norm turns left (counter-clockwise), so a
    car left of its line gets a negative command.
    """

    def __init__(self, waypoints: np.ndarray, gains: FollowerGains = FollowerGains(), dt: float = 0.01,
                 max_speed: float = 5.0):
        self.waypoints = np.asarray(waypoints, dtype=float)
        self.gains, self.dt, self.max_speed = gains, dt, max_speed
        self.reset()

    def reset(self) -> None:
        self.integral = 0.0
        self.prev_error: float | None = None

    def act(self, state: VehicleState) -> ActionCommand:
        g = self.gains
        target = lookahead_point(self.waypoints, (state.x, state.y), g.lookahead_m)
        bearing = math.atan2(target[1] - state.y, target[0] - state.x)
        err = (bearing - state.yaw + math.pi) % (2 * math.pi) - math.pi
        self.integral += err * self.dt
        deriv = 0.0 if self.prev_error is None else (err - self.prev_error) / self.dt
        self.prev_error = err
        steer = g.kp * err + g.ki * self.integral + g.kd * deriv
        return ActionCommand(g.speed / self.max_speed, steer)


def waypoint_follower_act(state: VehicleState, waypoints: np.ndarray, fixed_speed: float = 3.0,
                          gains: FollowerGains | None = None) -> ActionCommand:
    """Memoryless single call (no integral/derivative history)."""
    gains = replace(gains or FollowerGains(), speed=fixed_speed)
    return WaypointFollower(waypoints, gains).act(state)


# --------------------------------------------------------------------- env

class RacingEnv:
    """One ego car, optional static obstacles or one waypoint-following opponent.

    ``max_ticks`` is the simulation-step budget; one env step spans
    ``action_repeat`` ticks.  Progress accumulates per tick so lap counts and
    lap times are tick accurate.
    """

    def __init__(self, config: EnvConfig = EnvConfig(), track: TrackMap | None = None):
        self.config = config
        self.track = track if track is not None else resolve_track(config.track)
        self._seed_rng = np.random.default_rng(config.seed)
        self.done = True
        self.log: list[dict] = []
        self.obstacles: list[Footprint] = []
        self.opponent: VehicleState | None = None
        self.follower: WaypointFollower | None = None

    # -- helpers
    def _fp(self, s: VehicleState) -> Footprint:
        return Footprint(s.x, s.y, s.yaw, self.config.car_length_m, self.config.car_width_m)

    def _other_footprints(self) -> list[Footprint]:
        out = list(self.obstacles)
        if self.opponent is not None:
            out.append(self._fp(self.opponent))
        return out

    def scene(self) -> sensors.WorldScene:
        agents = [(self._fp(self.ego), "ego")] + [(fp, "opponent-red") for fp in self._other_footprints()]
        return sensors.WorldScene(self.track, tuple(agents))

    def _tangent_yaw(self, k: int) -> float:
        cl = self.track.centerline
        a, b = cl[k - 1], cl[(k + 1) % len(cl)]
        return math.atan2(b[1] - a[1], b[0] - a[0])

    def _random_ego_pose(self, rng) -> tuple[float, float, float]:
        cl = self.track.centerline
        for _ in range(1000):
            k = int(rng.integers(len(cl)))
            yaw = self._tangent_yaw(k)
            lat = rng.uniform(-0.5, 0.5)
            x, y = cl[k] + lat * np.array([-math.sin(yaw), math.cos(yaw)])
            yaw += rng.uniform(-0.2, 0.2)
            fp = Footprint(x, y, yaw, self.config.car_length_m, self.config.car_width_m)
            if not is_collision(self.track, fp):
                return float(x), float(y), float(yaw)
        raise PlacementError("could not place ego after 1000 attempts")

    def _place_obstacles(self, rng, ego: Footprint) -> list[Footprint]:
        cfg = self.config
        free_i, free_j = np.nonzero(self.track.clearance > 0.35)
        placed: list[Footprint] = []
        attempts = 0
        while len(placed) < cfg.n_obstacles:
            attempts += 1
            if attempts > 1000:
                raise PlacementError(f"placed {len(placed)}/{cfg.n_obstacles} obstacles after 1000 attempts")
            k = int(rng.integers(len(free_i)))
            x, y = self.track.cell_center(free_i[k], free_j[k])
            x, y = float(x), float(y)
            fp = Footprint(x, y, float(rng.uniform(-math.pi, math.pi)), cfg.car_length_m, cfg.car_width_m)
            if math.hypot(x - ego.x, y - ego.y) < cfg.obstacle_ego_clearance_m:
                continue
            if any(math.hypot(x - o.x, y - o.y) < cfg.obstacle_spacing_m for o in placed):
                continue
            if is_collision(self.track, fp, placed):
                continue
            placed.append(fp)
        return placed

    def _place_opponent(self, ego_p: float) -> VehicleState:
        cl = self.track.centerline
        target = (ego_p + self.config.opponent_gap_m / self.track.loop_length) % 1.0
        prog = np.array([progress_at(self.track, p) for p in cl])
        k = int(np.argmin(np.abs(wrap_progress(prog - target))))
        return VehicleState(float(cl[k, 0]), float(cl[k, 1]), self._tangent_yaw(k), 0.0, 0.0)

    # -- public API
    def reset(self, seed: int | None = None) -> StepResult:
        cfg = self.config
        if seed is None:
            seed = int(self._seed_rng.integers(2**63 - 1))
        rng = np.random.default_rng(seed)
        self.rng = rng
        if cfg.random_start:
            x, y, yaw = self._random_ego_pose(rng)
        else:
            x, y, yaw = self.track.start_pose
        self.ego = VehicleState(x, y, yaw, 0.0, 0.0)
        ego_fp = self._fp(self.ego)
        self.opponent, self.follower = None, None
        self.obstacles = []
        if cfg.mode == "multi-static":
            self.obstacles = self._place_obstacles(rng, ego_fp)
        self.tick = 0
        self.progress = progress_at(self.track, (x, y))
        self.total_progress = 0.0
        if cfg.mode == "multi-dynamic":
            self.opponent = self._place_opponent(self.progress)
            self.follower = WaypointFollower(self.track.centerline, cfg.follower, cfg.vehicle.dt_s,
                                             cfg.vehicle.max_speed)
            self.opp_progress = progress_at(self.track, (self.opponent.x, self.opponent.y))
            self.opp_total_progress = 0.0
            self.opp_lap_tick: int | None = None
        self.lap_tick: int | None = None
        self.prev_steer = 0.0
        self.prev_action = ActionCommand(0.005, 0.0)
        self.done = False
        self.collided = False
        self.log = []
        self._lidar = sensors.lidar_scan(self.scene(), self.ego.pose)
        self._lidar_tick = 0
        obs = self._observe()
        return StepResult(obs, 0.0, False, self._info())

    def _observe(self) -> sensors.ObservationBundle:
        cfg = self.config
        scene = self.scene()
        image = sensors.render_camera(scene, self.ego.pose)
        local = sensors.local_occupancy(scene, self.ego.pose, cfg.local_extent_m) if cfg.with_local_map else None
        return sensors.ObservationBundle(self._lidar.copy(), image, local, self._lidar_tick, self.tick)

    def _info(self) -> dict:
        info = {
            "progress": self.progress,
            "total_progress": self.total_progress,
            "laps": int(math.floor(self.total_progress + 1e-12)) if self.total_progress > 0 else 0,
            "lap_tick": self.lap_tick,
            "collision": self.collided,
            "pose": self.ego.pose,
            "speed": self.ego.speed,
            "tick": self.tick,
        }
        if self.opponent is not None:
            info.update(opponent_pose=self.opponent.pose, opponent_progress=self.opp_progress,
                        opponent_total_progress=self.opp_total_progress, opponent_lap_tick=self.opp_lap_tick)
        return info

    def step(self, action) -> StepResult:
        if self.done:
            raise StateError("step() called on a finished episode; call reset()")
        cfg = self.config
        if not isinstance(action, ActionCommand):
            action = ActionCommand(*action)
        p_start = self.progress
        total_start = self.total_progress
        collided = False
        for _ in range(cfg.action_repeat):
            if self.opponent is not None:
                self.opponent = step_dynamics(self.opponent, self.follower.act(self.opponent), cfg.vehicle.dt_s, cfg.vehicle)
                try:
                    op = progress_at(self.track, (self.opponent.x, self.opponent.y))
                    self.opp_total_progress += float(wrap_progress(op - self.opp_progress))
                    self.opp_progress = op
                except QueryError:
                    pass  # scripted opponent grazing a wall keeps its last progress
                if self.opp_lap_tick is None and self.opp_total_progress >= 1.0:
                    self.opp_lap_tick = self.tick + 1
            self.ego = step_dynamics(self.ego, action, cfg.vehicle.dt_s, cfg.vehicle)
            self.tick += 1
            collided = is_collision(self.track, self._fp(self.ego), self._other_footprints())
            if not collided:
                p = progress_at(self.track, (self.ego.x, self.ego.y))
                self.total_progress += float(wrap_progress(p - self.progress))
                self.progress = p
                if self.lap_tick is None and self.total_progress >= 1.0:
                    self.lap_tick = self.tick
            if self.tick % cfg.lidar_period_ticks == 0:
                self._lidar = sensors.lidar_scan(self.scene(), self.ego.pose)
                self._lidar_tick = self.tick
            if collided or self.tick >= cfg.max_ticks:
                break
        self.collided = collided
        if cfg.progress_mode == "signed-wrapped":
            # accumulated per-tick deltas equal the wrapped difference over the step
            reward = 100.0 * (self.total_progress - total_start) - (1.0 if collided else 0.0)
        else:
            reward = reward_single(p_start, self.progress, collided, "paper-absolute")
        if cfg.reward_mode == "multi":
            reward -= 0.1 * abs(action.steer - self.prev_steer)
        self.prev_steer = action.steer
        self.prev_action = action
        self.done = collided or self.tick >= cfg.max_ticks
        obs = self._observe()
        self.log.append({
            "tick": self.tick, "x": self.ego.x, "y": self.ego.y, "yaw": self.ego.yaw, "speed": self.ego.speed,
            "steer_norm": action.steer, "torque_norm": action.torque, "reward": reward,
            "progress": self.progress, "collision": int(collided), "done": int(self.done),
        })
        return StepResult(obs, reward, self.done, self._info())


def write_episode_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in LOG_COLUMNS})
