"""Oracle cross-check suites exposed through ``ccbfnav verify``.

Each suite compares a production routine against an independent, deliberately
plain reference (KKT linear solve, finite differences, explicit loops) and
reports the number of instances checked, failures and the worst error seen.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .cbf import CbfParams, EmaState, composite_h, project_halfspace, safety_filter
from .dynamics import Command, State
from .policy import ACTION_SCALE, Goal, reward, ttc_min
from .sensor import PointSet, RangeScan, SensorConfig, min_pool_invert, sensor_directions

SUITES = ("qp", "gradients", "softmin", "invariance", "pooling", "ttc", "reward")

QP_TOL = 1e-9
GRAD_STEP = 1e-6
GRAD_TOL = 1e-5
REWARD_TOL = 1e-12


@dataclass
class SuiteResult:
    suite: str
    checked: int = 0
    failures: int = 0
    max_error: float = 0.0
    elapsed: float = 0.0
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.failures == 0

    def record(self, error: float, ok: bool, note: str | None = None) -> None:
        self.checked += 1
        self.max_error = max(self.max_error, float(error))
        if not ok:
            self.failures += 1
            if note and len(self.notes) < 5:
                self.notes.append(note)

    def to_dict(self) -> dict:
        return dict(asdict(self), passed=self.passed)


def random_barrier_instance(rng: np.random.Generator, max_points: int = 64):
    """Random robot state and nearby point cloud, all in free space."""
    n = int(rng.integers(1, max_points + 1))
    p = rng.uniform(-2.0, 2.0, 3)
    v = rng.uniform(-3.0, 3.0, 3)
    directions = rng.normal(size=(n, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    pts = p + directions * rng.uniform(0.35, 6.0, (n, 1))
    return State(p, v, 0.0), pts


def kkt_projection(u_sp: np.ndarray, a: np.ndarray, b: float) -> np.ndarray:
    """argmin |u - u_sp|^2 s.t. a.u >= b by checking both active sets."""
    if a @ u_sp >= b or not np.any(a):
        return u_sp.copy()
    kkt = np.zeros((4, 4))
    kkt[:3, :3] = 2.0 * np.eye(3)
    kkt[:3, 3] = -a
    kkt[3, :3] = a
    sol = np.linalg.solve(kkt, np.concatenate([2.0 * u_sp, [b]]))
    return sol[:3]


def suite_qp(rng, n: int = 10_000, params: CbfParams = CbfParams()) -> SuiteResult:
    res = SuiteResult("qp")
    for k in range(n):
        if k % 2:
            state, pts = random_barrier_instance(rng)
            ev = composite_h(pts, state, params)
            normal, bound = ev.lie_g, ev.theta
        else:
            normal = rng.normal(size=3) * 10.0 ** rng.uniform(-3, 2)
            bound = float(rng.normal() * 10.0 ** rng.uniform(-2, 2))
        u_sp = rng.normal(size=3) * 3.0
        u, _ = project_halfspace(u_sp, normal, bound)
        ref = kkt_projection(u_sp, normal, bound)
        err = float(np.linalg.norm(u - ref)) / max(1.0, float(np.linalg.norm(ref)))
        res.record(err, err <= QP_TOL, f"instance {k}: error {err:.3e}")
    return res


def barrier_gradient_error(state: State, pts: np.ndarray, params: CbfParams,
                           step: float = GRAD_STEP) -> float:
    """Norm-wise relative error of analytic vs central-difference gradients."""
    ev = composite_h(pts, state, params)
    analytic = np.concatenate([ev.grad_p, ev.grad_v])
    numeric = np.empty(6)
    x = np.concatenate([state.p, state.v])
    for i in range(6):
        hi, lo = x.copy(), x.copy()
        hi[i] += step
        lo[i] -= step
        h_hi = composite_h(pts, State(hi[:3], hi[3:]), params).h
        h_lo = composite_h(pts, State(lo[:3], lo[3:]), params).h
        numeric[i] = (h_hi - h_lo) / (2.0 * step)
    return float(np.linalg.norm(numeric - analytic) / np.linalg.norm(analytic))


def suite_gradients(rng, n: int = 1000, params: CbfParams = CbfParams()) -> SuiteResult:
    res = SuiteResult("gradients")
    for k in range(n):
        state, pts = random_barrier_instance(rng)
        err = barrier_gradient_error(state, pts, params)
        res.record(err, err <= GRAD_TOL, f"instance {k}: relative error {err:.3e}")
    return res


def softmin_bracket_violation(state: State, pts: np.ndarray, params: CbfParams) -> float:
    """Positive when h leaves [gamma t_min - (gamma/kappa) ln N, gamma t_min]."""
    ev = composite_h(pts, state, params)
    p_rel = state.p - pts
    nu0 = np.sum(p_rel**2, axis=1) - params.epsilon**2
    shaped = params.lam * nu0 * (nu0**2 + params.sigma**2) ** ((params.p_exp - 1) / 2)
    nu = 2.0 * np.sum(p_rel * state.v, axis=1) + params.sign * shaped
    upper = params.gamma * float(np.min(np.tanh(nu / params.gamma)))
    lower = upper - params.gamma / params.kappa * math.log(len(pts))
    slack = 1e-12 * max(1.0, abs(upper))
    return max(ev.h - upper - slack, lower - ev.h - slack, 0.0)


def suite_softmin(rng, n: int = 10_000, params: CbfParams = CbfParams()) -> SuiteResult:
    res = SuiteResult("softmin")
    for k in range(n):
        state, pts = random_barrier_instance(rng, max_points=256)
        excess = softmin_bracket_violation(state, pts, params)
        res.record(excess, excess == 0.0, f"instance {k}: bracket exceeded by {excess:.3e}")
    return res


def suite_invariance(rng, runs: int = 2, r_seps=(1.5, 1.8, 2.0, 2.5, 3.0)) -> SuiteResult:
    """Filtered blind policy at zero lag must never crash."""
    from .harness import SweepSpec, run_episode

    res = SuiteResult("invariance")
    spec = SweepSpec(base_seed=int(rng.integers(2**32)))
    for r_sep in r_seps:
        for run in range(runs):
            out = run_episode(spec.episode_config(r_sep, 0.0, "waypoint+ccbf", run))
            res.record(max(0.0, -out.min_clearance), out.outcome != "crash",
                       f"r_sep={r_sep} run={run}: crash")
    return res


def suite_pooling(rng, n: int = 200) -> SuiteResult:
    res = SuiteResult("pooling")
    cfg = SensorConfig()
    rows, cols = cfg.pooled_shape
    ta, te = cfg.azimuth_rays // rows, cfg.elevation_rays // cols
    for k in range(n):
        raster = rng.uniform(0.1, cfg.max_range, (cfg.azimuth_rays, cfg.elevation_rays))
        raster[rng.random(raster.shape) < rng.uniform(0, 1)] = np.inf
        scan = RangeScan(raster, np.zeros(3), 0.0, 0.0, cfg)
        got = min_pool_invert(scan)
        ref = np.empty((rows, cols))
        for i in range(rows):
            for j in range(cols):
                m = min(raster[a, e] for a in range(i * ta, (i + 1) * ta)
                        for e in range(j * te, (j + 1) * te))
                ref[i, j] = 1.0 / m if math.isfinite(m) else 1.0 / cfg.max_range
        err = float(np.max(np.abs(got - ref)))
        res.record(err, err == 0.0, f"raster {k}: max difference {err:.3e}")
    return res


def suite_ttc(rng, n: int = 100) -> SuiteResult:
    res = SuiteResult("ttc")
    fixed = [
        (np.array([[5.0, 0.0, 0.0]]), np.array([1.0, 0.0, 0.0]), 5.0),
        (np.array([[5.0, 0.0, 0.0]]), np.array([-1.0, 0.0, 0.0]), 10.0),
        (np.array([[50.0, 0.0, 0.0]]), np.array([1.0, 0.0, 0.0]), 10.0),
        (np.zeros((0, 3)), np.array([1.0, 0.0, 0.0]), 10.0),
    ]
    for pts, v, want in fixed:
        got = ttc_min(pts, v)
        res.record(abs(got - want), got == want, f"fixed case: got {got}, want {want}")
    cfg = SensorConfig()
    dirs = sensor_directions(cfg)
    for k in range(n):
        raster = rng.uniform(0.2, cfg.max_range, dirs.shape[:2])
        raster[rng.random(raster.shape) < 0.5] = np.inf
        v = rng.normal(size=3) * 2.0
        scan = RangeScan(raster, np.zeros(3), 0.0, 0.0, cfg)
        best = 10.0
        for a in range(raster.shape[0]):
            for e in range(raster.shape[1]):
                r = raster[a, e]
                if not math.isfinite(r):
                    continue
                closing = float(dirs[a, e] @ v)
                if closing > 0:
                    best = min(best, min(max(r / closing, 0.0), 10.0))
        got = ttc_min(scan, v)
        err = abs(got - best) / max(best, 1e-12)
        res.record(err, err <= 1e-12, f"scan {k}: got {got}, loop {best}")
    return res


def _reward_reference(p, v, yaw, goal, u_prev, u_now, tau, prog):
    """Independent spreadsheet-style evaluation of the reward tables."""
    def R(m, a, x):
        return m * math.exp(-a * x * x)

    def P(m, a, x):
        return m * (math.exp(-a * x * x) - 1.0)

    d = [g - q for g, q in zip(goal, p)]
    delta = math.sqrt(sum(x * x for x in d))
    speed = math.sqrt(sum(x * x for x in v))
    psi = math.remainder(-yaw, 2 * math.pi)
    w_psi = R(1, 2, psi)
    xi = sum(a * b for a, b in zip(v, d)) / (speed * delta) if speed > 0 and delta > 0 else 0.0
    fwd = math.cos(yaw) * v[0] + math.sin(yaw) * v[1]
    un = [a / s for a, s in zip(u_now, ACTION_SCALE)]
    up = [a / s for a, s in zip(u_prev, ACTION_SCALE)]
    stab = 0.0
    if delta < 1:
        stab = (R(1.5, 10, speed) + R(1.5, 0.5, speed) + R(2, 0.2, psi) + R(4, 15, psi)
                + R(1.5, 5, u_now[3]) * w_psi)
    total = (R(3, 1, delta) + R(5, 8, delta) * w_psi + (20 - delta) / 20
             + (xi * R(2, 2, speed - 2) if xi > 0 else -0.2) * min(delta / 3, 1) + stab
             + P(2, 2, max(speed - 3, 0)) + P(2, 8, max(fwd, 0)) * (1 - R(1, 2, delta))
             + sum(P(0.3, 5, a - b) for a, b in zip(un, up))
             + P(0.1, 0.3, un[0]) + P(0.1, 0.3, un[1]) + P(0.15, 1, un[2]) + P(0.15, 2, un[3])
             + R(-3, 2, tau * tau))
    return (1 + 2 * prog) * total


def suite_reward(rng, n: int = 10_000) -> SuiteResult:
    res = SuiteResult("reward")
    for k in range(n):
        goal = np.array([40.0, 4.0, 4.0])
        near = rng.random() < 0.3
        p = goal + rng.normal(size=3) * (0.5 if near else 8.0)
        v = rng.normal(size=3) * 2.0
        yaw = rng.uniform(-math.pi, math.pi)
        u_prev = rng.uniform(-1, 1, 4) * ACTION_SCALE
        u_now = rng.uniform(-1, 1, 4) * ACTION_SCALE
        tau = rng.uniform(0, 10)
        prog = rng.random()
        got = reward(State(p, v, yaw), Command.from_array(u_prev), Command.from_array(u_now),
                     Goal(goal, 0.0), tau, prog, False).total
        ref = _reward_reference(p, v, yaw, goal, u_prev, u_now, tau, prog)
        err = abs(got - ref)
        res.record(err, err <= REWARD_TOL, f"state {k}: |diff| {err:.3e}")
    return res


def run_suite(name: str, seed: int = 0, **kwargs) -> SuiteResult:
    runners = {
        "qp": suite_qp, "gradients": suite_gradients, "softmin": suite_softmin,
        "invariance": suite_invariance, "pooling": suite_pooling, "ttc": suite_ttc,
        "reward": suite_reward,
    }
    if name not in runners:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    res = runners[name](rng, **kwargs)
    res.elapsed = time.perf_counter() - start
    return res


def filter_once(u_sp, state: State, pts, params: CbfParams) -> tuple[Command, dict]:
    """One filter evaluation from a fresh EMA state (used by ``eval-cbf``)."""
    points = PointSet.from_points(pts)
    cmd, report = safety_filter(u_sp, state, points, params, EmaState())
    return cmd, asdict(report)
