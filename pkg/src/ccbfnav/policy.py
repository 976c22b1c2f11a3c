"""Nominal navigation policy, time-to-collision telemetry, and reward/observation evaluators."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import Command, State, wrap_angle
from .sensor import RangeScan, min_pool_invert

TTC_CAP = 10.0
OBS_SIZE = 337
IMAGE_SLICE = slice(17, 337)
# Normalized-action scaling (ax, ay, az, yaw rate).
ACTION_SCALE = (2.0, 2.0, 1.5, math.pi / 3)

N_OBS_MIN = 25
N_OBS_MAX = 70
SUCCESS_UPPER = 0.70
SUCCESS_LOWER = 0.60


@dataclass(frozen=True)
class Goal:
    position: np.ndarray
    yaw: float = 0.0


@dataclass(frozen=True)
class PolicyConfig:
    v_max: float = 2.0
    slow_radius: float = 3.0
    k_v: float = 1.5
    k_yaw: float = 1.0
    accel_limits: tuple[float, float, float] = ACTION_SCALE[:3]
    yaw_rate_limit: float = ACTION_SCALE[3]

    def validate(self) -> None:
        if not (self.v_max > 0 and self.slow_radius > 0 and self.k_v > 0 and self.k_yaw >= 0):
            raise ValueError("policy gains and speeds must be positive")
        if min(self.accel_limits) <= 0 or self.yaw_rate_limit <= 0:
            raise ValueError("policy limits must be positive")


def yaw_error(target_yaw: float, yaw: float) -> float:
    """((target - yaw + pi) mod 2 pi) - pi, reported in (-pi, pi]."""
    return wrap_angle(target_yaw - yaw)


def waypoint_policy(state: State, goal: Goal, cfg: PolicyConfig = PolicyConfig()) -> Command:
    """Obstacle-blind velocity-tracking law toward the goal."""
    delta = goal.position - state.p
    dist = math.sqrt(float(delta @ delta))
    if dist > 0:
        v_des = cfg.v_max * min(dist / cfg.slow_radius, 1.0) * (delta / dist)
    else:
        v_des = np.zeros(3)
    a = cfg.k_v * (v_des - state.v)
    # Uniform scaling keeps the direction while meeting every per-axis limit.
    ratio = np.max(np.abs(a) / np.asarray(cfg.accel_limits))
    if ratio > 1.0:
        a = a / ratio
    yaw_rate = cfg.k_yaw * yaw_error(goal.yaw, state.yaw)
    yaw_rate = min(max(yaw_rate, -cfg.yaw_rate_limit), cfg.yaw_rate_limit)
    return Command(a, yaw_rate)


def ttc_min(scan: RangeScan | np.ndarray, v_sensor) -> float:
    """Minimum time-to-collision over all returns.

    ``scan`` is a :class:`RangeScan` or an (k, 3) array of sensor-frame
    returns; ``v_sensor`` is the robot velocity in the sensor frame.
    """
    r = scan.sensor_points() if isinstance(scan, RangeScan) else np.asarray(scan, dtype=float)
    if len(r) == 0:
        return TTC_CAP
    dist = np.linalg.norm(r, axis=1)
    closing = (r @ np.asarray(v_sensor, dtype=float)) / dist
    approaching = closing > 0
    if not approaching.any():
        return TTC_CAP
    tau = np.clip(dist[approaching] / closing[approaching], 0.0, TTC_CAP)
    return float(tau.min())


def reward_kernels(m: float, a: float, v: float) -> tuple[float, float]:
    """Returns (m exp(-a v^2), m (exp(-a v^2) - 1))."""
    g = math.exp(-a * v * v)
    return m * g, m * (g - 1.0)


def _R(m, a, v):
    return m * math.exp(-a * v * v)


def _P(m, a, v):
    return m * (math.exp(-a * v * v) - 1.0)


@dataclass(frozen=True)
class RewardBreakdown:
    r_pos: float = 0.0
    r_prox: float = 0.0
    r_lin: float = 0.0
    r_vel: float = 0.0
    r_spd: float = 0.0
    r_hdg: float = 0.0
    r_omega: float = 0.0
    r_stab: float = 0.0
    p_spd: float = 0.0
    p_plus_x: float = 0.0
    p_du: float = 0.0
    p_abs_u: float = 0.0
    p_ctrl: float = 0.0
    p_ttc: float = 0.0
    scale: float = 1.0
    collided: bool = False
    total: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def curriculum_scale(progress: float) -> float:
    return 1.0 + 2.0 * progress


def reward(state: State, prev_cmd: Command, cmd: Command, goal: Goal, tau_min: float,
           progress: float, collided: bool, omega=None) -> RewardBreakdown:
    """Per-step navigation reward.

    Commands enter the control penalties in normalized units (divided by
    ``ACTION_SCALE``). ``omega`` is the body angular velocity; for the point
    robot it defaults to (0, 0, cmd.yaw_rate).
    """
    if not 0.0 <= progress <= 1.0:
        raise ValueError("progress must be in [0, 1]")
    scale = curriculum_scale(progress)
    if collided:
        return RewardBreakdown(scale=scale, collided=True, total=-10.0)

    delta_w = goal.position - state.p
    dist = math.sqrt(float(delta_w @ delta_w))
    speed = math.sqrt(float(state.v @ state.v))
    psi_e = yaw_error(goal.yaw, state.yaw)
    omega_z = cmd.yaw_rate if omega is None else float(omega[2])
    c, s_ = math.cos(state.yaw), math.sin(state.yaw)
    v_forward = c * state.v[0] + s_ * state.v[1]

    w_psi = _R(1, 2, psi_e)
    s_gate = _R(2, 2, speed - 2)
    xi = float(state.v @ delta_w) / (speed * dist) if speed > 0 and dist > 0 else 0.0
    w_dist = 1.0 - _R(1, 2, dist)

    r_pos = _R(3, 1, dist)
    r_prox = _R(5, 8, dist) * w_psi
    r_lin = (20.0 - dist) / 20.0
    r_vel = (xi * s_gate if xi > 0 else -0.2) * min(dist / 3.0, 1.0)

    r_spd = _R(1.5, 10, speed) + _R(1.5, 0.5, speed)
    r_hdg = _R(2, 0.2, psi_e) + _R(4, 15, psi_e)
    r_omega = _R(1.5, 5, omega_z) * w_psi
    r_stab = (r_spd + r_hdg + r_omega) if dist < 1.0 else 0.0

    u_now = cmd.as_array() / np.asarray(ACTION_SCALE)
    u_prev = prev_cmd.as_array() / np.asarray(ACTION_SCALE)
    du = u_now - u_prev
    p_spd = _P(2, 2, max(speed - 3.0, 0.0))
    p_plus_x = _P(2, 8, max(v_forward, 0.0)) * w_dist
    p_du = sum(_P(0.3, 5, float(x)) for x in du)
    p_abs_u = (_P(0.1, 0.3, float(u_now[0])) + _P(0.1, 0.3, float(u_now[1]))
               + _P(0.15, 1, float(u_now[2])) + _P(0.15, 2, float(u_now[3])))
    p_ctrl = p_du + p_abs_u
    p_ttc = _R(-3, 2, tau_min * tau_min)

    total = scale * (r_pos + r_prox + r_vel + r_lin + r_stab
                     + p_spd + p_plus_x + p_ctrl + p_ttc)
    return RewardBreakdown(r_pos, r_prox, r_lin, r_vel, r_spd, r_hdg, r_omega, r_stab,
                           p_spd, p_plus_x, p_du, p_abs_u, p_ctrl, p_ttc, scale, False, total)


@dataclass
class CurriculumState:
    n_obs: int = N_OBS_MIN
    window: int = 2048
    outcomes: deque = field(default_factory=deque)

    def record(self, success: bool) -> None:
        self.outcomes.append(bool(success))
        while len(self.outcomes) > self.window:
            self.outcomes.popleft()

    @property
    def success_rate(self) -> float:
        return sum(self.outcomes) / len(self.outcomes) if self.outcomes else 0.0


def curriculum_update(cur: CurriculumState, success_rate: float) -> CurriculumState:
    if not 0.0 <= success_rate <= 1.0:
        raise ValueError("success_rate must be in [0, 1]")
    n = cur.n_obs
    if success_rate > SUCCESS_UPPER:
        n = min(n + 2, N_OBS_MAX)
    elif success_rate < SUCCESS_LOWER:
        n = max(n - 1, N_OBS_MIN)
    return CurriculumState(n, cur.window, deque(cur.outcomes))


def progress(cur: CurriculumState) -> tuple[float, float]:
    """Normalized curriculum progress and the matching reward scale."""
    frac = (cur.n_obs - N_OBS_MIN) / (N_OBS_MAX - N_OBS_MIN)
    return frac, curriculum_scale(frac)


@dataclass(frozen=True)
class ObservationNoise:
    goal_direction: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0


def build_observation(state: State, goal: Goal, prev_cmd: Command, image: np.ndarray,
                      noise: ObservationNoise | None = None,
                      rng: np.random.Generator | None = None, omega=None) -> np.ndarray:
    """Pack the 337-element policy observation.

    Layout: goal direction in the yaw-aligned frame (0:3), goal distance (3),
    roll (4), pitch (5), yaw error (6), body linear velocity (7:10), body angular
    velocity (10:13), previous setpoint (13:17), inverse-range image (17:337).
    Uniform noise, when configured, perturbs only the goal direction, roll and pitch.
    """
    image = np.asarray(image, dtype=float)
    if image.size != 320:
        raise ValueError("inverse-range image must have 320 cells")
    c, s = math.cos(state.yaw), math.sin(state.yaw)

    def to_body(vec):
        return np.array([c * vec[0] + s * vec[1], -s * vec[0] + c * vec[1], vec[2]])

    delta = goal.position - state.p
    dist = math.sqrt(float(delta @ delta))
    direction = to_body(delta) / dist if dist > 0 else np.zeros(3)
    roll = pitch = 0.0
    if noise is not None and rng is not None:
        direction = direction + rng.uniform(-noise.goal_direction, noise.goal_direction, 3)
        roll += rng.uniform(-noise.roll, noise.roll)
        pitch += rng.uniform(-noise.pitch, noise.pitch)

    obs = np.empty(OBS_SIZE)
    obs[0:3] = direction
    obs[3] = dist
    obs[4] = roll
    obs[5] = pitch
    obs[6] = yaw_error(goal.yaw, state.yaw)
    obs[7:10] = to_body(state.v)
    obs[10:13] = (0.0, 0.0, 0.0) if omega is None else omega
    obs[13:17] = prev_cmd.as_array()
    obs[IMAGE_SLICE] = image.reshape(-1)
    return obs


def unpack_image(obs: np.ndarray, shape=(16, 20)) -> np.ndarray:
    return np.asarray(obs)[IMAGE_SLICE].reshape(shape)


def observation_from_scan(state: State, goal: Goal, prev_cmd: Command, scan: RangeScan,
                          **kwargs) -> np.ndarray:
    return build_observation(state, goal, prev_cmd, min_pool_invert(scan), **kwargs)
