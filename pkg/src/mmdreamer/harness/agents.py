"""Policies the harness can drive an environment with.

Every agent exposes ``reset(result, env)`` and ``act(result, env)`` where
``result`` is the latest :class:`~mmdreamer.env.StepResult`.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .. import autodiff as ad
from ..behavior import ActorCriticConfig, BehaviorLearner, act
from ..env import FollowerGains, WaypointFollower, offset_waypoints
from ..errors import FormatError
from ..vehicle import ActionCommand
from ..worldmodel import ModelConfig, WorldModel
from .buffer import RESET_ACTION, quantize_image


class RandomAgent:
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def reset(self, result, env) -> None:
        pass

    def act(self, result, env) -> ActionCommand:
        return ActionCommand(self.rng.uniform(0.005, 1.0), self.rng.uniform(-1.0, 1.0))


class StaticAgent:
    """Minimum torque, straight wheels: the car effectively stands still."""

    def reset(self, result, env) -> None:
        pass

    def act(self, result, env) -> ActionCommand:
        return ActionCommand(0.005, 0.0)


class FollowerAgent:
    """Waypoint follower driving the ego car, optionally on a laterally offset line."""

    def __init__(self, speed: float = 3.0, offset_m: float = 0.0, gains: FollowerGains | None = None):
        self.speed, self.offset_m, self.gains = speed, offset_m, gains

    def reset(self, result, env) -> None:
        gains = replace(self.gains or env.config.follower, speed=self.speed)
        wps = offset_waypoints(env.track.centerline, self.offset_m) if self.offset_m else env.track.centerline
        self.follower = WaypointFollower(wps, gains, env.config.vehicle.dt_s * env.config.action_repeat,
                                         env.config.vehicle.max_speed)

    def act(self, result, env) -> ActionCommand:
        return self.follower.act(env.ego)


class ModelAgent:
    """World-model filter plus actor; deterministic unless ``explore``.

    Each call filters the newest observation with the action that produced
    it, mirroring how episodes are stored for training.
    """

    def __init__(self, model: WorldModel, learner: BehaviorLearner, explore: bool = False,
                 seed: int = 0, noise_std: float = 0.0):
        self.model, self.learner = model, learner
        self.explore, self.noise_std = explore, noise_std
        self.rng = np.random.default_rng(seed)
        self.belief = None
        self.prev_action = RESET_ACTION

    def reset(self, result, env) -> None:
        self.belief = None
        self.prev_action = RESET_ACTION

    def act(self, result, env) -> ActionCommand:
        obs = replace(result.obs, image=quantize_image(result.obs.image) / 255.0)
        cmd, self.belief = act(self.model, self.learner.actor, self.belief, obs, self.prev_action,
                               self.explore, self.rng, self.noise_std)
        self.prev_action = cmd.as_tuple()
        return cmd


def save_agent(path, model: WorldModel, learner: BehaviorLearner, meta: dict | None = None) -> str:
    arrays = {f"wm.{k}": v for k, v in model.state_dict().items()}
    arrays.update({f"ac.{k}": v for k, v in learner.state_dict().items()})
    info = {"kind": "agent", "variant": model.config.variant, "model": model.config.to_dict(),
            "behavior": _ac_dict(learner.config)}
    info.update(meta or {})
    return ad.save_checkpoint(path, arrays, info)


def _ac_dict(cfg: ActorCriticConfig) -> dict:
    from dataclasses import asdict
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}


def load_agent(path, expect_variant: str | None = None) -> tuple[WorldModel, BehaviorLearner, dict]:
    arrays, meta = ad.load_checkpoint(path)
    if meta.get("kind") != "agent":
        raise FormatError(f"{path} is not an agent checkpoint")
    mcfg = ModelConfig.from_dict(meta["model"])
    if expect_variant is not None and mcfg.variant != expect_variant:
        raise FormatError(f"checkpoint variant {mcfg.variant} does not match {expect_variant}")
    acfg = ActorCriticConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["behavior"].items()})
    model = WorldModel(mcfg)
    model.load_state_dict({k[3:]: v for k, v in arrays.items() if k.startswith("wm.")})
    learner = BehaviorLearner(mcfg.z_dim + mcfg.h_dim, acfg)
    learner.load_state_dict({k[3:]: v for k, v in arrays.items() if k.startswith("ac.")})
    return model, learner, meta
