"""Posterior-latent export for offline embedding analysis."""
from __future__ import annotations

import csv
from dataclasses import replace

import numpy as np

from ..env import EnvConfig, RacingEnv
from ..track import resolve_track
from .agents import ModelAgent, load_agent
from .evaluate import env_config_from_meta, episode_seeds


def collect_latents(checkpoint, episodes: int = 3, track: str | None = None, seed: int = 0,
                    max_ticks: int = 2000, random_start: bool = True):
    """Rows ``[progress, x, y, *posterior_mean]`` per env step, ordered by (episode, tick).

    Also returns the episode logs the rows were taken from.
    """
    model, learner, meta = load_agent(checkpoint)
    cfg = env_config_from_meta(meta["env"]) if "env" in meta else EnvConfig()
    cfg = replace(cfg, max_ticks=max_ticks, random_start=random_start,
                  with_local_map=model.config.variant == "multimodal-map")
    if track is not None:
        cfg = replace(cfg, track=track)
    env = RacingEnv(cfg, resolve_track(cfg.track))
    agent = ModelAgent(model, learner)
    rows, logs = [], []
    for s in episode_seeds(seed, episodes):
        res = env.reset(seed=s)
        agent.reset(res, env)
        action = agent.act(res, env)
        while not res.done:
            res = env.step(action)
            # filtering the new observation also yields the next action
            action = agent.act(res, env)
            x, y, _ = res.info["pose"]
            rows.append(np.concatenate([[res.info["progress"], x, y], agent.belief.posterior.mean.data[0]]))
        logs.append(list(env.log))
    return np.array(rows), logs


def export_latents(checkpoint, path, episodes: int = 3, **kw) -> np.ndarray:
    rows, _ = collect_latents(checkpoint, episodes, **kw)
    z = rows.shape[1] - 3 if rows.size else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["progress", "x", "y"] + [f"z{i}" for i in range(z)])
        w.writerows([[repr(float(v)) for v in r] for r in rows])
    return rows
