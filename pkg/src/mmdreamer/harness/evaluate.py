"""Single-agent evaluation and head-to-head races."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..env import EnvConfig, FollowerGains, RacingEnv
from ..track import TrackMap, resolve_track
from ..vehicle import VehicleParams
from .agents import ModelAgent, load_agent


@dataclass
class EvalMetrics:
    mean_progress: float
    min_progress: float
    max_progress: float
    mean_reward: float

    FIELDS = ("mean_progress", "min_progress", "max_progress", "mean_reward")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


@dataclass
class EvalReport:
    metrics: EvalMetrics
    episodes: list = field(default_factory=list)
    horizon: int | None = None


def run_episode(env: RacingEnv, agent, seed: int, stop=None) -> dict:
    """Drive one episode; ``stop(result, env)`` may end it early."""
    res = env.reset(seed=seed)
    agent.reset(res, env)
    ret = 0.0
    steps = 0
    while not res.done:
        res = env.step(agent.act(res, env))
        ret += res.reward
        steps += 1
        if stop is not None and stop(res, env):
            break
    info = res.info
    return {"seed": seed, "return": ret, "progress": info["total_progress"], "steps": steps,
            "ticks": info["tick"], "collision": bool(info["collision"]), "lap_tick": info["lap_tick"],
            "info": info, "log": list(env.log)}


def episode_seeds(seed: int, episodes: int) -> list[int]:
    return [int(s) for s in np.random.default_rng(seed).integers(2**63 - 1, size=episodes)]


def evaluate_agent(agent, env_config: EnvConfig, episodes: int = 30, seed: int = 0,
                   track: TrackMap | None = None) -> EvalReport:
    env = RacingEnv(env_config, track)
    rows = [run_episode(env, agent, s) for s in episode_seeds(seed, episodes)]
    prog = np.array([r["progress"] for r in rows])
    rets = np.array([r["return"] for r in rows])
    metrics = EvalMetrics(float(prog.mean()), float(prog.min()), float(prog.max()), float(rets.mean()))
    return EvalReport(metrics, rows)


def eval_env_config(base: EnvConfig | None = None, track: str | None = None, mode: str | None = None,
                    max_ticks: int = 4000) -> EnvConfig:
    """Evaluation protocol: start pose, longer budget, same mode as training unless overridden."""
    base = base or EnvConfig()
    cfg = replace(base, random_start=False, max_ticks=max_ticks)
    if track is not None:
        cfg = replace(cfg, track=track)
    if mode is not None:
        cfg = replace(cfg, mode=mode)
    return cfg


def evaluate_single(checkpoint, track: str | None = None, episodes: int = 30, horizon: int = 5,
                    mode: str | None = None, seed: int = 0, max_ticks: int = 4000) -> EvalReport:
    """Exploration-free evaluation of a saved agent from the track's start pose.

    ``horizon`` is the imagination horizon recorded with the report; acting
    itself never imagines, so it only matters to code that keeps learning.
    """
    model, learner, meta = load_agent(checkpoint)
    env_cfg = env_config_from_meta(meta["env"]) if "env" in meta else EnvConfig()
    env_cfg = replace(env_cfg, with_local_map=model.config.variant == "multimodal-map")
    cfg = eval_env_config(env_cfg, track, mode, max_ticks)
    report = evaluate_agent(ModelAgent(model, learner), cfg, episodes, seed, resolve_track(cfg.track))
    report.horizon = horizon
    return report


def write_eval_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EvalMetrics.FIELDS)
        w.writerow([repr(v) for v in report.metrics.as_dict().values()])


def write_episode_rows(rows, path, columns=("seed", "return", "progress", "steps", "ticks", "collision")) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("episode",) + tuple(columns))
        for i, r in enumerate(rows):
            w.writerow([i] + [repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


# ---------------------------------------------------------------- races

RACE_METRICS = ("Mean Progress (%)", "Mean / Best Lap Time (s)", "Mean Reward", "Race Wins (%)", "Collision (%)")
OUTCOMES = ("win", "collision", "timeout")


@dataclass
class RaceResult:
    table: dict
    episodes: list
    outcome_pct: dict


def _race_stop(res, env) -> bool:
    return res.info["lap_tick"] is not None


def race_agent(agent, env_config: EnvConfig | None = None, episodes: int = 30, seed: int = 0,
               track: TrackMap | None = None) -> RaceResult:
    """One-lap races against the waypoint follower placed ahead of the ego car.

    Outcomes: ``win`` if the ego completes the lap before the opponent
    without colliding, ``collision`` if the ego crashes first, ``timeout``
    otherwise (budget exhausted or beaten to the line).
    """
    cfg = env_config or EnvConfig()
    cfg = replace(cfg, mode="multi-dynamic", reward_mode="multi")
    env = RacingEnv(cfg, track)
    dt = cfg.vehicle.dt_s
    rows = []
    for i, s in enumerate(episode_seeds(seed, episodes)):
        ep = run_episode(env, agent, s, stop=_race_stop)
        info = ep["info"]
        lap, opp_lap = info["lap_tick"], info["opponent_lap_tick"]
        if lap is not None and (opp_lap is None or lap < opp_lap):
            outcome = "win"
        elif ep["collision"]:
            outcome = "collision"
        else:
            outcome = "timeout"
        rows.append({"episode": i, "seed": s, "outcome": outcome,
                     "progress": min(max(ep["progress"], 0.0), 1.0),
                     "lap_time_s": lap * dt if lap is not None else math.nan,
                     "reward": ep["return"], "ticks": ep["ticks"], "log": ep["log"]})
    n = len(rows)
    pct = {o: 100.0 * sum(r["outcome"] == o for r in rows) / n for o in OUTCOMES}
    laps = [r["lap_time_s"] for r in rows if not math.isnan(r["lap_time_s"])]
    table = {
        RACE_METRICS[0]: 100.0 * float(np.mean([r["progress"] for r in rows])),
        RACE_METRICS[1]: (float(np.mean(laps)), float(np.min(laps))) if laps else (math.nan, math.nan),
        RACE_METRICS[2]: float(np.mean([r["reward"] for r in rows])),
        RACE_METRICS[3]: pct["win"],
        RACE_METRICS[4]: pct["collision"],
    }
    return RaceResult(table, rows, pct)


def race_head_to_head(checkpoint, track: str | None = None, episodes: int = 30, seed: int = 0,
                      max_ticks: int = 4000) -> RaceResult:
    model, learner, meta = load_agent(checkpoint)
    env_cfg = env_config_from_meta(meta["env"]) if "env" in meta else EnvConfig()
    env_cfg = replace(env_cfg, max_ticks=max_ticks, random_start=False, obstacle_count=None,
                      with_local_map=model.config.variant == "multimodal-map")
    if track is not None:
        env_cfg = replace(env_cfg, track=track)
    return race_agent(ModelAgent(model, learner), env_cfg, episodes, seed, resolve_track(env_cfg.track))


def write_race_table(result: RaceResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("metric", "value"))
        for k in RACE_METRICS:
            v = result.table[k]
            w.writerow((k, f"{v[0]:.3f} / {v[1]:.3f}" if isinstance(v, tuple) else f"{v:.3f}"))


def write_race_episodes(result: RaceResult, path) -> None:
    cols = ("episode", "seed", "outcome", "progress", "lap_time_s", "reward", "ticks")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in result.episodes:
            w.writerow([r[c] for c in cols])


def env_config_meta(cfg: EnvConfig) -> dict:
    """JSON-friendly echo of an EnvConfig."""
    return asdict(cfg)


def env_config_from_meta(d: dict) -> EnvConfig:
    d = dict(d)
    vehicle = VehicleParams(**d.pop("vehicle", {}))
    follower = FollowerGains(**d.pop("follower", {}))
    return EnvConfig(**d, vehicle=vehicle, follower=follower)


def save_report_dir(report: EvalReport, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_eval_csv(report, d / "metrics.csv")
    write_episode_rows(report.episodes, d / "episodes.csv")
