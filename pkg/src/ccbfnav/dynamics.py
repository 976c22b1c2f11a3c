"""Point-mass double integrator with first-order actuator lag."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def wrap_angle(angle: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = (angle + math.pi) % (2 * math.pi) - math.pi
    return math.pi if wrapped == -math.pi else wrapped


@dataclass(frozen=True)
class State:
    p: np.ndarray
    v: np.ndarray
    yaw: float = 0.0

    @classmethod
    def at(cls, position, velocity=(0.0, 0.0, 0.0), yaw: float = 0.0) -> "State":
        return cls(np.array(position, dtype=float), np.array(velocity, dtype=float),
                   wrap_angle(float(yaw)))


@dataclass(frozen=True)
class Command:
    a: np.ndarray
    yaw_rate: float = 0.0

    @classmethod
    def zero(cls) -> "Command":
        return cls(np.zeros(3), 0.0)

    def as_array(self) -> np.ndarray:
        return np.append(self.a, self.yaw_rate)

    @classmethod
    def from_array(cls, values) -> "Command":
        values = np.asarray(values, dtype=float)
        return cls(values[:3].copy(), float(values[3]))


@dataclass(frozen=True)
class ActuatorState:
    filtered: Command = field(default_factory=Command.zero)


@dataclass(frozen=True)
class SimConfig:
    physics_dt: float = 0.005
    tau_d: float = 0.0
    disturbance_bound: float = 0.0
    accel_limit: float = 10.0
    yaw_rate_limit: float = math.pi
    robot_radius: float = 0.2
    # Not used by the linear model; kept for documentation of the simulated vehicle.
    mass: float = 2.10

    def validate(self) -> None:
        if not self.physics_dt > 0:
            raise ValueError("physics_dt must be > 0")
        if not self.tau_d >= 0:
            raise ValueError("tau_d must be >= 0")
        if not self.disturbance_bound >= 0:
            raise ValueError("disturbance_bound must be >= 0")
        if not (self.accel_limit > 0 and self.yaw_rate_limit > 0):
            raise ValueError("actuator limits must be > 0")
        if not self.robot_radius > 0:
            raise ValueError("robot_radius must be > 0")


def low_pass(act: ActuatorState, cmd: Command, dt: float, tau_d: float) -> ActuatorState:
    """Exact zero-order-hold discretization of a first-order lag, per dimension."""
    if tau_d == 0.0:
        return ActuatorState(Command(np.array(cmd.a, dtype=float), float(cmd.yaw_rate)))
    gain = 1.0 - math.exp(-dt / tau_d)
    prev = act.filtered
    return ActuatorState(Command(prev.a + gain * (cmd.a - prev.a),
                                 prev.yaw_rate + gain * (cmd.yaw_rate - prev.yaw_rate)))


def clamp_command(cmd: Command, cfg: SimConfig) -> Command:
    a = cmd.a
    norm = math.sqrt(float(a @ a))
    if norm > cfg.accel_limit:
        a = a * (cfg.accel_limit / norm)
    yaw_rate = min(max(cmd.yaw_rate, -cfg.yaw_rate_limit), cfg.yaw_rate_limit)
    return Command(a, yaw_rate)


def step(state: State, act: ActuatorState, cmd: Command, cfg: SimConfig,
         disturbance=None) -> tuple[State, ActuatorState]:
    """Advance one physics tick with semi-implicit Euler."""
    disturbance = np.zeros(3) if disturbance is None else np.asarray(disturbance, dtype=float)
    if not (np.all(np.isfinite(cmd.a)) and math.isfinite(cmd.yaw_rate)
            and np.all(np.isfinite(disturbance))):
        raise ValueError("non-finite command or disturbance")
    if not (np.all(np.isfinite(state.p)) and np.all(np.isfinite(state.v))):
        raise ValueError("non-finite state")
    if float(disturbance @ disturbance) > (cfg.disturbance_bound + 1e-12) ** 2:
        raise ValueError("disturbance exceeds the configured bound")
    dt = cfg.physics_dt
    act = low_pass(act, clamp_command(cmd, cfg), dt, cfg.tau_d)
    v = state.v + (act.filtered.a + disturbance) * dt
    p = state.p + v * dt
    return State(p, v, wrap_angle(state.yaw + act.filtered.yaw_rate * dt)), act
