"""Action normalization and a kinematic bicycle with first-order actuator lag."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ContractError

MAX_SPEED = 5.0
MAX_STEER = math.radians(24.0)
TORQUE_MIN = 0.005


@dataclass(frozen=True)
class VehicleParams:
    wheelbase_m: float = 0.33
    tau_v_s: float = 0.5
    tau_s_s: float = 0.1
    dt_s: float = 0.01
    max_speed: float = MAX_SPEED
    max_steer: float = MAX_STEER


@dataclass(frozen=True)
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    speed: float = 0.0
    steer: float = 0.0

    @property
    def pose(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.yaw)


@dataclass(frozen=True)
class ActionCommand:
    """Normalized command; both fields are clamped on construction."""

    torque: float
    steer: float

    def __post_init__(self):
        t, s = float(self.torque), float(self.steer)
        if math.isnan(t) or math.isnan(s):
            raise ContractError("action contains NaN")
        object.__setattr__(self, "torque", min(max(t, TORQUE_MIN), 1.0))
        object.__setattr__(self, "steer", min(max(s, -1.0), 1.0))

    def as_tuple(self) -> tuple[float, float]:
        return (self.torque, self.steer)


def clamp_action(torque: float, steer: float) -> ActionCommand:
    return ActionCommand(torque, steer)


def action_to_physical(cmd: ActionCommand, params: VehicleParams = VehicleParams()) -> tuple[float, float]:
    """(target speed m/s, target steering angle rad)."""
    return params.max_speed * cmd.torque, params.max_steer * cmd.steer


def step_dynamics(state: VehicleState, cmd: ActionCommand, dt: float | None = None,
                  params: VehicleParams = VehicleParams()) -> VehicleState:
    """One explicit-Euler step of the lagged kinematic bicycle."""
    dt = params.dt_s if dt is None else dt
    if not dt > 0:
        raise ContractError("dt must be positive")
    v_tgt, s_tgt = action_to_physical(cmd, params)
    # exact discretization of the first-order lag keeps the update stable for any dt
    av = 1.0 - math.exp(-dt / params.tau_v_s)
    as_ = 1.0 - math.exp(-dt / params.tau_s_s)
    v, steer = state.speed, state.steer
    x = state.x + dt * v * math.cos(state.yaw)
    y = state.y + dt * v * math.sin(state.yaw)
    yaw = state.yaw + dt * v * math.tan(steer) / params.wheelbase_m
    yaw = (yaw + math.pi) % (2 * math.pi) - math.pi
    v = min(max(v + av * (v_tgt - v), 0.0), params.max_speed)
    steer = min(max(steer + as_ * (s_tgt - steer), -params.max_steer), params.max_steer)
    return VehicleState(x, y, yaw, v, steer)
