"""Episode execution, outcome classification and the density x actuator-lag sweep."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .cbf import CbfParams, EmaState, FilterReport, safety_filter
from .dynamics import ActuatorState, Command, SimConfig, State, step
from .policy import Goal, PolicyConfig, reward, ttc_min, waypoint_policy
from .sensor import Pose, PointSet, SensorConfig, rotate_yaw, scan, sparsify
from .world import World, WorldSpec, generate_world

OUTCOMES = ("success", "stagnation", "crash")
POLICIES = ("waypoint",)
DISTURBANCE_MODES = ("none", "random", "adversarial")
REPORT_SCHEMA_VERSION = 1

TRACE_COLUMNS = (
    "t", "px", "py", "pz", "vx", "vy", "vz", "yaw",
    "ax_cmd", "ay_cmd", "az_cmd", "yaw_rate_cmd",
    "h", "theta", "eta", "intervention", "intervened",
    "clearance", "goal_dist", "tau_min", "reward",
)


class ConfigError(ValueError):
    """Invalid episode or sweep configuration."""


class SweepError(RuntimeError):
    """An episode inside a sweep failed."""


@dataclass(frozen=True)
class Rates:
    sensor: float = 10.0
    policy: float = 40.0
    filter: float = 50.0


@dataclass(frozen=True)
class EpisodeConfig:
    world: World | None = None
    world_spec: WorldSpec | None = None
    policy: str = "waypoint"
    filter_enabled: bool = True
    cbf: CbfParams = field(default_factory=CbfParams)
    sim: SimConfig = field(default_factory=SimConfig)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    policy_cfg: PolicyConfig = field(default_factory=PolicyConfig)
    rates: Rates = field(default_factory=Rates)
    timeout: float = 120.0
    success_radius: float = 1.0
    seed: int = 0
    disturbance: str = "none"
    record_trace: bool = False

    def dividers(self) -> tuple[int, int, int]:
        """Physics ticks per sensor, policy and filter update."""
        physics_rate = 1.0 / self.sim.physics_dt
        out = []
        for name in ("sensor", "policy", "filter"):
            ratio = physics_rate / getattr(self.rates, name)
            if ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
                raise ConfigError(f"physics rate {physics_rate:g} Hz is not an integer "
                                  f"multiple of the {name} rate")
            out.append(int(round(ratio)))
        return tuple(out)

    def validate(self) -> None:
        if (self.world is None) == (self.world_spec is None):
            raise ConfigError("exactly one of world or world_spec must be given")
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}")
        if self.disturbance not in DISTURBANCE_MODES:
            raise ConfigError(f"unknown disturbance mode {self.disturbance!r}")
        if not self.timeout > 0 or not self.success_radius > 0:
            raise ConfigError("timeout and success_radius must be > 0")
        if self.disturbance != "none" and not self.sim.disturbance_bound > 0:
            raise ConfigError("a disturbance mode needs sim.disturbance_bound > 0")
        try:
            for part in (self.cbf, self.sim, self.sensor, self.policy_cfg):
                part.validate()
            if self.world_spec is not None:
                self.world_spec.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.dividers()


@dataclass(frozen=True, eq=False)
class Trace:
    data: np.ndarray  # (ticks, len(TRACE_COLUMNS))

    def column(self, name: str) -> np.ndarray:
        return self.data[:, TRACE_COLUMNS.index(name)]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_COLUMNS)
            writer.writerows([repr(float(x)) for x in row] for row in self.data)

    @classmethod
    def from_csv(cls, path: str | Path) -> "Trace":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if tuple(rows[0]) != TRACE_COLUMNS:
            raise ValueError(f"{path}: unexpected trace header")
        return cls(np.array(rows[1:], dtype=float).reshape(-1, len(TRACE_COLUMNS)))


@dataclass(frozen=True)
class EpisodeResult:
    outcome: str
    elapsed: float
    path_length: float
    min_clearance: float
    max_speed: float
    interventions: int
    intervention_total: float
    trace: Trace | None = field(default=None, compare=False, repr=False)

    def summary(self) -> dict:
        out = asdict(self)
        out.pop("trace")
        return out


def classify_trace(trace: Trace, success_radius: float = 1.0) -> str:
    """Outcome from trace columns alone (used to cross-check reported outcomes)."""
    if np.any(trace.column("clearance") <= 0):
        return "crash"
    if np.any(trace.column("goal_dist") <= success_radius):
        return "success"
    return "stagnation"


class _Clearance:
    """Exact signed clearance using only obstacles that can beat the nearest wall."""

    def __init__(self, world: World, robot_radius: float, reselect: float = 1.0):
        self.world = world
        self.robot_radius = robot_radius
        self.reselect = reselect
        self.cut = min(world.width, world.height) / 2 + reselect
        self.anchor = None

    def __call__(self, p: np.ndarray) -> float:
        w = self.world
        walls = min(p[1], w.width - p[1], p[2], w.height - p[2])
        if self.anchor is None or float(np.sum((p - self.anchor) ** 2)) > self.reselect**2:
            self.anchor = p.copy()
            if len(w.radii):
                surface = np.linalg.norm(w.centers - p, axis=1) - w.radii
                keep = surface <= self.cut
                self.centers, self.radii = w.centers[keep], w.radii[keep]
            else:
                self.centers, self.radii = w.centers, w.radii
        d = walls
        if len(self.radii):
            diff = self.centers - p
            d = min(d, float(np.min(np.sqrt(np.einsum("ij,ij->i", diff, diff)) - self.radii)))
        return float(d) - self.robot_radius


def _nearest_surface_direction(world: World, p: np.ndarray) -> np.ndarray:
    """Unit vector from p toward the closest obstacle or wall surface."""
    candidates = [(p[1], np.array([0.0, -1.0, 0.0])),
                  (world.width - p[1], np.array([0.0, 1.0, 0.0])),
                  (p[2], np.array([0.0, 0.0, -1.0])),
                  (world.height - p[2], np.array([0.0, 0.0, 1.0]))]
    if len(world.radii):
        diff = world.centers - p
        dist = np.linalg.norm(diff, axis=1)
        k = int(np.argmin(dist - world.radii))
        if dist[k] > 0:
            candidates.append((dist[k] - world.radii[k], diff[k] / dist[k]))
    return min(candidates, key=lambda c: c[0])[1]


def _sample_ball(rng: np.random.Generator, radius: float) -> np.ndarray:
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    return direction * radius * rng.random() ** (1.0 / 3.0)


def run_episode(cfg: EpisodeConfig) -> EpisodeResult:
    """Simulate one episode on a fixed physics-rate master clock."""
    cfg.validate()
    world = cfg.world if cfg.world is not None else generate_world(cfg.world_spec)
    sensor_div, policy_div, filter_div = cfg.dividers()
    dt = cfg.sim.physics_dt
    n_ticks = int(math.ceil(cfg.timeout / dt - 1e-9))
    rng = np.random.default_rng(cfg.seed)
    goal = Goal(np.asarray(world.goal, dtype=float), world.start_yaw)
    bound = cfg.sim.disturbance_bound
    telemetry = cfg.record_trace

    state = State.at(world.start_position, yaw=world.start_yaw)
    act = ActuatorState()
    ema = EmaState()
    clearance_of = _Clearance(world, cfg.sim.robot_radius)
    points = PointSet.empty()
    u_sp = prev_sp = cmd = Command.zero()
    report = FilterReport()
    disturbance = np.zeros(3)
    tau = 10.0
    rew = 0.0
    rows = np.empty((n_ticks, len(TRACE_COLUMNS))) if telemetry else None

    min_clearance = math.inf
    path_length = 0.0
    max_speed = 0.0
    interventions = 0
    intervention_total = 0.0
    outcome = "stagnation"
    ticks = n_ticks

    for k in range(n_ticks):
        if k % sensor_div == 0:
            last_scan = scan(world, Pose(state.p, state.yaw), cfg.sensor, k * dt, rng)
            points = sparsify(last_scan, cfg.cbf.n_points, cfg.sensor.voxel)
            if telemetry:
                tau = ttc_min(last_scan, rotate_yaw(state.v, -state.yaw))
        if k % policy_div == 0:
            prev_sp, u_sp = u_sp, waypoint_policy(state, goal, cfg.policy_cfg)
            if cfg.disturbance == "random":
                disturbance = _sample_ball(rng, bound)
            if telemetry:
                rew = reward(state, prev_sp, u_sp, goal, tau, 0.0, False).total
        if cfg.disturbance == "adversarial":
            disturbance = bound * _nearest_surface_direction(world, state.p)
        if not cfg.filter_enabled:
            cmd = u_sp
        elif k % filter_div == 0:
            cmd, report = safety_filter(u_sp, state, points, cfg.cbf, ema)
            if report.intervened:
                interventions += 1
                intervention_total += report.intervention

        p_before = state.p
        state, act = step(state, act, cmd, cfg.sim, disturbance)
        step_len = float(np.linalg.norm(state.p - p_before))
        path_length += step_len
        max_speed = max(max_speed, float(np.linalg.norm(state.v)))
        clearance = clearance_of(state.p)
        min_clearance = min(min_clearance, clearance)
        goal_dist = float(np.linalg.norm(goal.position - state.p))
        if telemetry:
            rows[k] = (
                (k + 1) * dt, *state.p, *state.v, state.yaw, *cmd.a, cmd.yaw_rate,
                report.h, report.theta, report.eta, report.intervention,
                float(report.intervened), clearance, goal_dist, tau,
                -10.0 if clearance <= 0 else rew,
            )
        if clearance <= 0:
            outcome, ticks = "crash", k + 1
            break
        if goal_dist <= cfg.success_radius:
            outcome, ticks = "success", k + 1
            break

    return EpisodeResult(
        outcome=outcome,
        elapsed=ticks * dt,
        path_length=path_length,
        min_clearance=min_clearance,
        max_speed=max_speed,
        interventions=interventions,
        intervention_total=intervention_total,
        trace=Trace(rows[:ticks].copy()) if telemetry else None,
    )


# -- sweep -------------------------------------------------------------------

def stable_seed(*parts) -> int:
    """64-bit seed from a stable hash of ``parts`` (independent of run order)."""
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def config_name(policy: str, filtered: bool) -> str:
    return f"{policy}+ccbf" if filtered else policy


def parse_config_name(name: str) -> tuple[str, bool]:
    policy, _, suffix = name.partition("+")
    if policy not in POLICIES or suffix not in ("", "ccbf"):
        raise ConfigError(f"unknown configuration {name!r}")
    return policy, suffix == "ccbf"


@dataclass(frozen=True)
class SweepSpec:
    r_sep: tuple[float, ...] = (1.5, 1.8, 2.0, 2.5, 3.0)
    tau_d: tuple[float, ...] = (0.0, 0.05, 0.10, 0.25)
    runs: int = 20
    base_seed: int = 0
    configs: tuple[str, ...] = ("waypoint+ccbf", "waypoint")
    world: WorldSpec = field(default_factory=WorldSpec)
    cbf: CbfParams = field(default_factory=CbfParams)
    sim: SimConfig = field(default_factory=SimConfig)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    policy_cfg: PolicyConfig = field(default_factory=PolicyConfig)
    rates: Rates = field(default_factory=Rates)
    timeout: float = 120.0
    success_radius: float = 1.0
    disturbance: str = "none"

    def validate(self) -> None:
        if not (self.r_sep and self.tau_d and self.configs) or self.runs < 1:
            raise ConfigError("sweep needs at least one r_sep, tau_d, config and run")
        for name in self.configs:
            parse_config_name(name)
        for tau in self.tau_d:
            if tau < 0:
                raise ConfigError("tau_d values must be >= 0")
        self.episode_config(self.r_sep[0], self.tau_d[0], self.configs[0], 0).validate()

    def world_spec(self, r_sep: float, run: int) -> WorldSpec:
        return replace(self.world, r_sep=r_sep,
                       seed=stable_seed(self.base_seed, "world", float(r_sep), run))

    def episode_config(self, r_sep: float, tau_d: float, config: str, run: int) -> EpisodeConfig:
        policy, filtered = parse_config_name(config)
        return EpisodeConfig(
            world_spec=self.world_spec(r_sep, run),
            policy=policy, filter_enabled=filtered,
            cbf=self.cbf, sim=replace(self.sim, tau_d=float(tau_d)),
            sensor=self.sensor, policy_cfg=self.policy_cfg, rates=self.rates,
            timeout=self.timeout, success_radius=self.success_radius,
            seed=stable_seed(self.base_seed, "episode", float(r_sep), float(tau_d), config, run),
            disturbance=self.disturbance,
        )

    def cells(self) -> list[tuple[float, float, str]]:
        return [(r, t, c) for r in self.r_sep for t in self.tau_d for c in self.configs]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SweepSpec":
        from .config import build_dataclass
        return build_dataclass(cls, data)


@dataclass(frozen=True)
class EpisodeRecord:
    r_sep: float
    tau_d: float
    config: str
    run: int
    seed: int
    outcome: str
    elapsed: float
    path_length: float
    min_clearance: float
    max_speed: float
    interventions: int
    intervention_total: float


@dataclass(frozen=True)
class CellStats:
    r_sep: float
    tau_d: float
    config: str
    n: int
    success: int
    stagnation: int
    crash: int

    def rate(self, outcome: str) -> float:
        return getattr(self, outcome) / self.n

    @property
    def success_rate(self) -> float:
        return self.rate("success")

    @property
    def crash_rate(self) -> float:
        return self.rate("crash")

    @property
    def stagnation_rate(self) -> float:
        return self.rate("stagnation")


@dataclass(frozen=True)
class SweepReport:
    spec: SweepSpec
    cells: tuple[CellStats, ...]
    episodes: tuple[EpisodeRecord, ...]

    def cell(self, r_sep: float, tau_d: float, config: str) -> CellStats:
        for c in self.cells:
            if (c.r_sep, c.tau_d, c.config) == (r_sep, tau_d, config):
                return c
        raise KeyError((r_sep, tau_d, config))

    def to_dict(self) -> dict:
        return {
            "version": REPORT_SCHEMA_VERSION,
            "spec": self.spec.to_dict(),
            "cells": [dict(asdict(c), success_rate=c.success_rate, crash_rate=c.crash_rate,
                           stagnation_rate=c.stagnation_rate) for c in self.cells],
            "episodes": [asdict(e) for e in self.episodes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "SweepReport":
        if data.get("version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report version {data.get('version')!r}")
        names = {f.name for f in fields(CellStats)}
        cells = tuple(CellStats(**{k: v for k, v in c.items() if k in names})
                      for c in data["cells"])
        episodes = tuple(EpisodeRecord(**e) for e in data["episodes"])
        return cls(SweepSpec.from_dict(data["spec"]), cells, episodes)


@lru_cache(maxsize=64)
def _cached_world(spec: WorldSpec) -> World:
    return generate_world(spec)


def _run_task(task) -> EpisodeRecord:
    spec, r_sep, tau_d, config, run, trace_dir = task
    ep = spec.episode_config(r_sep, tau_d, config, run)
    ep = replace(ep, world=_cached_world(ep.world_spec), world_spec=None,
                 record_trace=trace_dir is not None)
    try:
        result = run_episode(ep)
    except Exception as exc:
        raise SweepError(f"episode failed in cell r_sep={r_sep}, tau_d={tau_d}, "
                         f"config={config}, run={run}: {exc}") from exc
    if trace_dir is not None:
        result.trace.to_csv(Path(trace_dir) / trace_filename(r_sep, tau_d, config, run))
    return EpisodeRecord(r_sep, tau_d, config, run, ep.seed, result.outcome, result.elapsed,
                         result.path_length, result.min_clearance, result.max_speed,
                         result.interventions, result.intervention_total)


def trace_filename(r_sep: float, tau_d: float, config: str, run: int) -> str:
    return f"trace_rsep{r_sep:g}_tau{tau_d:g}_{config.replace('+', '-')}_run{run:03d}.csv"


def aggregate(spec: SweepSpec, episodes) -> tuple[CellStats, ...]:
    cells = []
    for r_sep, tau_d, config in spec.cells():
        outs = [e.outcome for e in episodes
                if (e.r_sep, e.tau_d, e.config) == (r_sep, tau_d, config)]
        cells.append(CellStats(r_sep, tau_d, config, len(outs), outs.count("success"),
                               outs.count("stagnation"), outs.count("crash")))
    return tuple(cells)


def run_sweep(spec: SweepSpec, workers: int = 1, trace_dir: str | Path | None = None,
              progress=None) -> SweepReport:
    """Run every (r_sep, tau_d, config, run) episode and aggregate outcome rates.

    Results do not depend on ``workers``: seeds come from :func:`stable_seed`
    and records are re-ordered before aggregation.
    """
    spec.validate()
    if trace_dir is not None:
        Path(trace_dir).mkdir(parents=True, exist_ok=True)
        trace_dir = str(trace_dir)
    tasks = [(spec, r, t, c, run, trace_dir)
             for (r, t, c) in spec.cells() for run in range(spec.runs)]
    if workers <= 1:
        records = []
        for task in tasks:
            records.append(_run_task(task))
            if progress:
                progress(records[-1])
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = []
            for rec in pool.map(_run_task, tasks, chunksize=1):
                records.append(rec)
                if progress:
                    progress(rec)
    return SweepReport(spec, aggregate(spec, records), tuple(records))


# -- export ------------------------------------------------------------------

CELL_COLUMNS = ("r_sep", "tau_d", "config", "success_rate", "crash_rate", "stagnation_rate", "n")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def export_report(report: SweepReport, out_dir: str | Path,
                  formats: tuple[str, ...] = ("csv", "json", "plot")) -> list[Path]:
    """Write report files; returns the paths written."""
    out = Path(out_dir)
    written = []

    def emit(name: str, text: str) -> None:
        path = out / name
        try:
            out.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8", newline="")
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        written.append(path)

    if "csv" in formats:
        emit("cells.csv", _csv_text(CELL_COLUMNS, [
            (repr(c.r_sep), repr(c.tau_d), c.config, repr(c.success_rate),
             repr(c.crash_rate), repr(c.stagnation_rate), c.n) for c in report.cells]))
        ep_fields = [f.name for f in fields(EpisodeRecord)]
        emit("episodes.csv", _csv_text(ep_fields, [
            [repr(v) if isinstance(v, float) else v for v in astuple_record(e)]
            for e in report.episodes]))
    if "json" in formats:
        emit("summary.json", report.to_json() + "\n")
    if "plot" in formats:
        # Long format: one row per (outcome row, tau_d column, config series, r_sep x).
        emit("plot_data.csv", _csv_text(
            ("outcome", "tau_d", "config", "r_sep", "rate", "n"),
            [(o, repr(c.tau_d), c.config, repr(c.r_sep), repr(c.rate(o)), c.n)
             for o in OUTCOMES for c in report.cells]))
    return written


def astuple_record(e: EpisodeRecord) -> tuple:
    return tuple(getattr(e, f.name) for f in fields(EpisodeRecord))


def load_cells_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
