"""Flat key-value run configuration.

One ``key = value`` per line, ``#`` starts a comment.  Run-level keys are
bare; nested settings use dotted prefixes::

    seed = 3
    env.mode = multi-static
    model.variant = multimodal-map
    behavior.horizon = 15
    vehicle.tau_v_s = 0.5
    follower.kp = 1.2

Tuples are written as comma-separated lists.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..behavior import ActorCriticConfig
from ..env import EnvConfig, FollowerGains
from ..errors import FormatError, ParameterError
from ..vehicle import VehicleParams
from ..worldmodel import ModelConfig

SECTIONS = ("env", "model", "behavior", "vehicle", "follower")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    total_steps: int = 100_000
    prefill_steps: int = 5000
    buffer_capacity: int = 100_000
    batch_size: int = 16
    seq_len: int = 50
    seq_len_ref_repeat: int = 4
    updates_per_collect: int = 100
    update_every_steps: int = 0
    checkpoint_every: int = 10_000
    eval_episodes: int = 10
    eval_horizon: int = 5
    eval_max_ticks: int = 4000
    wm_lr: float = 6e-4
    clip_norm: float = 100.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-7
    env: EnvConfig = field(default_factory=lambda: EnvConfig(mode="multi-static"))
    model: ModelConfig = field(default_factory=ModelConfig)
    behavior: ActorCriticConfig = field(default_factory=ActorCriticConfig)

    def __post_init__(self):
        for name in ("total_steps", "batch_size", "seq_len", "updates_per_collect", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.prefill_steps < 0 or self.update_every_steps < 0:
            raise ParameterError("prefill_steps and update_every_steps must be >= 0")

    @property
    def effective_seq_len(self) -> int:
        """Sequence length rescaled so its wall-clock span is the same for any action repeat."""
        return max(2, round(self.seq_len * self.seq_len_ref_repeat / self.env.action_repeat))

    def updates_for(self, episode_steps: int) -> int:
        if self.update_every_steps > 0:
            return max(1, episode_steps // self.update_every_steps)
        return self.updates_per_collect

    def with_overrides(self, overrides: dict) -> "TrainConfig":
        return apply_overrides(self, overrides)


def _convert(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if default is None:
            return None if raw.lower() == "none" else int(raw)
        return raw
    except ValueError:
        raise FormatError(f"bad value {raw!r} for {key}") from None


def _replace(obj, key: str, values: dict):
    names = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
    kw = {}
    for k, v in values.items():
        if k not in names:
            raise FormatError(f"unknown config key {key}.{k}" if key else f"unknown config key {k}")
        kw[k] = _convert(v, names[k], f"{key}.{k}" if key else k) if isinstance(v, str) else v
    return dataclasses.replace(obj, **kw)


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Apply ``{"key" or "section.key": value}`` (string values are parsed)."""
    grouped: dict = {s: {} for s in SECTIONS}
    top = {}
    for key, value in overrides.items():
        section, _, name = key.partition(".")
        if name:
            if section not in grouped:
                raise FormatError(f"unknown config section {section!r}")
            grouped[section][name] = value
        else:
            top[key] = value
    env = cfg.env
    if grouped["vehicle"]:
        env = dataclasses.replace(env, vehicle=_replace(env.vehicle, "vehicle", grouped["vehicle"]))
    if grouped["follower"]:
        env = dataclasses.replace(env, follower=_replace(env.follower, "follower", grouped["follower"]))
    env = _replace(env, "env", grouped["env"])
    model = _replace(cfg.model, "model", grouped["model"])
    behavior = _replace(cfg.behavior, "behavior", grouped["behavior"])
    cfg = dataclasses.replace(cfg, env=env, model=model, behavior=behavior)
    return _replace(cfg, "", top)


def parse_config_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return apply_overrides(base or TrainConfig(), parse_config_text(Path(path).read_text()))


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_items(cfg: TrainConfig) -> dict:
    """Every setting as a flat ``{key: text}`` mapping (inverse of ``apply_overrides``)."""
    out = {}
    for f in dataclasses.fields(cfg):
        if f.name not in SECTIONS:
            out[f.name] = _fmt(getattr(cfg, f.name))
    for section, obj in (("env", cfg.env), ("model", cfg.model), ("behavior", cfg.behavior),
                         ("vehicle", cfg.env.vehicle), ("follower", cfg.env.follower)):
        for f in dataclasses.fields(obj):
            if isinstance(getattr(obj, f.name), (VehicleParams, FollowerGains)):
                continue
            out[f"{section}.{f.name}"] = _fmt(getattr(obj, f.name))
    return out


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config_items(cfg).items())


# Small networks and a light update cadence that fit 100k env steps into a
# few CPU hours.  Input sizes (1080 beams, 64x64 images) are unchanged.
DESK_PROFILE = {
    "batch_size": 8, "seq_len": 16, "update_every_steps": 25, "prefill_steps": 5000,
    "buffer_capacity": 60_000, "checkpoint_every": 25_000,
    "model.z_dim": 16, "model.h_dim": 64, "model.zpi_dim": 200, "model.hidden": 64,
    "model.lidar_hidden": (128,), "model.cam_channels": (8, 16, 32, 32), "model.dec_depth": 128,
    "model.dec_channels": (32, 16, 8), "model.reward_hidden": (64,), "model.action_embed": 8,
    "behavior.hidden": (64, 64), "behavior.explore_decay_steps": 60_000, "behavior.explore_min": 0.1,
}

# Tiny networks for smoke and determinism tests.
SMOKE_PROFILE = {
    "total_steps": 300, "prefill_steps": 200, "batch_size": 3, "seq_len": 6, "updates_per_collect": 2,
    "buffer_capacity": 5000, "checkpoint_every": 150, "eval_episodes": 2, "eval_max_ticks": 200,
    "env.max_ticks": 400,
    "model.z_dim": 4, "model.h_dim": 12, "model.zpi_dim": 8, "model.hidden": 12,
    "model.lidar_hidden": (16,), "model.cam_channels": (4, 4, 8, 8), "model.dec_depth": 16,
    "model.dec_channels": (8, 4, 4), "model.reward_hidden": (8,), "model.action_embed": 4,
    "behavior.hidden": (12,), "behavior.horizon": 4,
}


def profile(name: str) -> TrainConfig:
    if name == "full":
        return TrainConfig()
    if name == "desk":
        return TrainConfig().with_overrides(DESK_PROFILE)
    if name == "smoke":
        return TrainConfig().with_overrides(SMOKE_PROFILE)
    raise ParameterError(f"unknown profile {name!r}")
