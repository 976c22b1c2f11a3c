"""``ccbfnav`` command-line front end.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime error,
4 verification failure.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np
import tomli

from . import __version__
from .cbf import composite_h
from .config import CliConfig, load_config, set_dotted
from .dynamics import Command, State
from .harness import (ConfigError, EpisodeConfig, SweepError, export_report, run_episode,
                      run_sweep)
from .verify import SUITES, filter_once, run_suite
from .world import World, WorldError, generate_world

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_VERIFY = 4
OUTPUT_SCHEMA_VERSION = 1


class CliError(click.ClickException):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.exit_code = code


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def _resolve(config_path, sets, flags: dict) -> CliConfig:
    """Defaults < config file < --set entries < dedicated flags."""
    overrides: dict = {}
    for item in sets:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise CliError(f"--set expects key=value, got {item!r}", EXIT_CONFIG)
        set_dotted(overrides, key.strip(), _parse_value(value.strip()))
    for key, value in flags.items():
        if value is not None:
            set_dotted(overrides, key, value)
    try:
        return load_config(config_path, overrides)
    except (ConfigError, WorldError, ValueError, TypeError) as exc:
        raise CliError(f"configuration error: {exc}", EXIT_CONFIG) from exc


def _echo_config(cfg: CliConfig, out_dir: Path, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    data = cfg.to_dict()
    if extra:
        data["run"] = extra
    (out_dir / "config.json").write_text(
        json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _emit(as_json: bool, payload: dict, lines: list[str]) -> None:
    if as_json:
        click.echo(json.dumps({"version": OUTPUT_SCHEMA_VERSION, **payload},
                              indent=1, sort_keys=True, default=_json_default))
    else:
        for line in lines:
            click.echo(line)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _load_structured(path: str) -> object:
    text = Path(path).read_text(encoding="utf-8")
    if path.endswith(".toml"):
        return tomli.loads(text)
    return json.loads(text)


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False),
                             help="TOML configuration file.")
set_option = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                          help="Override one config key, e.g. --set cbf.kappa=40.")
json_option = click.option("--json", "as_json", is_flag=True,
                           help="Machine-readable JSON output.")


@click.group()
@click.version_option(__version__, prog_name="ccbfnav")
def cli():
    """Composite-CBF safety filter simulator and ablation harness."""


@cli.command("gen-world")
@config_option
@set_option
@click.option("--spec", "spec_path", type=click.Path(dir_okay=False),
              help="TOML or JSON file with world parameters (the [world] table).")
@click.option("--r-sep", type=float, help="Minimum obstacle center separation (m).")
@click.option("--seed", type=int, help="World seed.")
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Destination JSON fixture.")
@json_option
def gen_world(config_path, sets, spec_path, r_sep, seed, out, as_json):
    """Generate a corridor world and write it as a JSON fixture."""
    flags = {"world.r_sep": r_sep, "world.seed": seed}
    if spec_path:
        try:
            spec_data = _load_structured(spec_path)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read world spec {spec_path}: {exc}", EXIT_CONFIG) from exc
        spec_data = spec_data.get("world", spec_data)
        sets = tuple(sets) + tuple(f"world.{k}={json.dumps(v)}" for k, v in spec_data.items())
    cfg = _resolve(config_path, sets, flags)
    try:
        world = generate_world(cfg.world)
        world.save(out)
    except WorldError as exc:
        raise CliError(f"world generation failed: {exc}", EXIT_RUNTIME) from exc
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc}", EXIT_RUNTIME) from exc
    _emit(as_json, {"out": out, "obstacles": len(world), "spec": dataclasses.asdict(cfg.world)},
          [f"wrote {out}: {len(world)} obstacles "
           f"(r_sep={cfg.world.r_sep:g}, seed={cfg.world.seed})"])


@cli.command()
@config_option
@set_option
@click.option("--world", "world_path", type=click.Path(dir_okay=False, exists=True),
              help="World JSON fixture (otherwise generated from the [world] table).")
@click.option("--spec", "spec_path", type=click.Path(dir_okay=False),
              help="TOML or JSON file with world parameters.")
@click.option("--r-sep", type=float, help="Obstacle separation for a generated world.")
@click.option("--policy", type=click.Choice(["waypoint"]), default="waypoint", show_default=True)
@click.option("--filter", "filter_mode", type=click.Choice(["on", "off"]), default="on",
              show_default=True)
@click.option("--tau-d", type=float, help="Actuator lag time constant (s).")
@click.option("--seed", type=int, default=0, show_default=True, help="Episode seed.")
@click.option("--world-seed", type=int, help="Seed for a generated world.")
@click.option("--timeout", type=float, help="Episode timeout (s).")
@click.option("--disturbance", type=click.Choice(["none", "random", "adversarial"]))
@click.option("--trace-out", type=click.Path(dir_okay=False), help="Write the trace CSV here.")
@click.option("--out-dir", type=click.Path(file_okay=False),
              help="Write config echo, result JSON and trace CSV here.")
@json_option
def episode(config_path, sets, world_path, spec_path, r_sep, policy, filter_mode, tau_d, seed,
            world_seed, timeout, disturbance, trace_out, out_dir, as_json):
    """Run one episode and print its outcome."""
    if world_path and (spec_path or r_sep is not None or world_seed is not None):
        raise CliError("--world cannot be combined with --spec, --r-sep or --world-seed",
                       EXIT_CONFIG)
    if spec_path:
        try:
            spec_data = _load_structured(spec_path)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read world spec {spec_path}: {exc}", EXIT_CONFIG) from exc
        spec_data = spec_data.get("world", spec_data)
        sets = tuple(sets) + tuple(f"world.{k}={json.dumps(v)}" for k, v in spec_data.items())
    cfg = _resolve(config_path, sets, {
        "world.r_sep": r_sep, "world.seed": world_seed, "sim.tau_d": tau_d,
        "episode.timeout": timeout, "episode.disturbance": disturbance})
    world = None
    if world_path:
        try:
            world = World.load(world_path)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"cannot load world {world_path}: {exc}", EXIT_CONFIG) from exc
    ep = EpisodeConfig(
        world=world, world_spec=None if world is not None else cfg.world,
        policy=policy, filter_enabled=filter_mode == "on", cbf=cfg.cbf, sim=cfg.sim,
        sensor=cfg.sensor, policy_cfg=cfg.policy, rates=cfg.rates,
        timeout=cfg.episode.timeout, success_radius=cfg.episode.success_radius, seed=seed,
        disturbance=cfg.episode.disturbance, record_trace=bool(trace_out or out_dir))
    try:
        ep.validate()
    except ConfigError as exc:
        raise CliError(f"configuration error: {exc}", EXIT_CONFIG) from exc
    try:
        result = run_episode(ep)
        summary = result.summary()
        if out_dir:
            out = Path(out_dir)
            _echo_config(cfg, out, {"command": "episode", "policy": policy,
                                    "filter": filter_mode, "seed": seed,
                                    "world": world_path})
            (out / "result.json").write_text(
                json.dumps({"version": OUTPUT_SCHEMA_VERSION, **summary}, indent=1,
                           sort_keys=True) + "\n", encoding="utf-8")
            result.trace.to_csv(out / "trace.csv")
        if trace_out:
            result.trace.to_csv(trace_out)
    except (ValueError, OSError, WorldError) as exc:
        raise CliError(f"episode failed: {exc}", EXIT_RUNTIME) from exc
    _emit(as_json, summary, [
        result.outcome,
        f"  elapsed        {result.elapsed:.3f} s",
        f"  path length    {result.path_length:.3f} m",
        f"  min clearance  {result.min_clearance:.4f} m",
        f"  max speed      {result.max_speed:.3f} m/s",
        f"  interventions  {result.interventions}",
    ])


@cli.command()
@config_option
@set_option
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--runs", type=click.IntRange(min=1), help="Runs per cell.")
@click.option("--base-seed", type=int, help="Base seed for world and episode seeds.")
@click.option("--traces", is_flag=True, help="Also write one trace CSV per episode.")
@click.option("--quiet", is_flag=True, help="No per-episode progress on stderr.")
@json_option
def sweep(config_path, sets, workers, out_dir, runs, base_seed, traces, quiet, as_json):
    """Run the density x actuator-lag grid and write the report files."""
    cfg = _resolve(config_path, sets, {"sweep.runs": runs, "sweep.base_seed": base_seed})
    spec = cfg.sweep_spec()
    out = Path(out_dir)
    total = len(spec.cells()) * spec.runs
    done = [0]

    def progress(rec):
        done[0] += 1
        if not quiet:
            click.echo(f"[{done[0]}/{total}] r_sep={rec.r_sep:g} tau_d={rec.tau_d:g} "
                       f"{rec.config} run={rec.run}: {rec.outcome}", err=True)

    try:
        _echo_config(cfg, out)
        report = run_sweep(spec, workers=workers,
                           trace_dir=out / "traces" if traces else None, progress=progress)
        written = export_report(report, out)
    except (SweepError, OSError, WorldError) as exc:
        raise CliError(f"sweep failed: {exc}", EXIT_RUNTIME) from exc
    lines = [f"{'r_sep':>6} {'tau_d':>6} {'config':<14} {'success':>8} {'crash':>6} "
             f"{'stagn.':>7}"]
    for c in report.cells:
        lines.append(f"{c.r_sep:>6g} {c.tau_d:>6g} {c.config:<14} {c.success_rate:>8.2f} "
                     f"{c.crash_rate:>6.2f} {c.stagnation_rate:>7.2f}")
    lines.append(f"wrote {', '.join(p.name for p in written)} to {out}")
    _emit(as_json, {"out_dir": str(out), "files": [p.name for p in written],
                    "cells": report.to_dict()["cells"]}, lines)


def _vector(value, n: int, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.shape != (n,) or not np.all(np.isfinite(arr)):
        raise CliError(f"{what} must be {n} finite numbers", EXIT_CONFIG)
    return arr


def _load_points(path: str) -> np.ndarray:
    try:
        if path.endswith(".json"):
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            if isinstance(data, dict):
                data = data["points"]
            pts = np.asarray(data, dtype=float)
        elif path.endswith(".npy"):
            pts = np.load(path)
        else:
            pts = np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot read points {path}: {exc}", EXIT_CONFIG) from exc
    pts = np.asarray(pts, dtype=float)
    if pts.size == 0:
        return np.zeros((0, 3))
    if pts.ndim != 2 or pts.shape[1] != 3 or not np.all(np.isfinite(pts)):
        raise CliError("points must be an (n, 3) array of finite numbers", EXIT_CONFIG)
    return pts


@cli.command("eval-cbf")
@config_option
@set_option
@click.option("--state", "state_text", required=True,
              help='JSON object or file: {"p": [x,y,z], "v": [vx,vy,vz], "yaw": 0}.')
@click.option("--points-file", required=True, type=click.Path(dir_okay=False, exists=True),
              help="Obstacle points as JSON, .npy or CSV (x,y,z per row).")
@click.option("--params", "params_path", type=click.Path(dir_okay=False, exists=True),
              help="TOML or JSON file with barrier parameters (the [cbf] table).")
@click.option("--command", "command_text", default="0,0,0,0", show_default=True,
              help="Nominal ax,ay,az,yaw_rate.")
@json_option
def eval_cbf(config_path, sets, state_text, points_file, params_path, command_text, as_json):
    """Print the barrier value, gradients, margin and filtered command."""
    if params_path:
        try:
            data = _load_structured(params_path)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read params {params_path}: {exc}", EXIT_CONFIG) from exc
        data = data.get("cbf", data)
        sets = tuple(sets) + tuple(f"cbf.{k}={json.dumps(v)}" for k, v in data.items())
    cfg = _resolve(config_path, sets, {})
    try:
        raw = state_text
        if not raw.lstrip().startswith("{"):
            raw = Path(raw).read_text(encoding="utf-8")
        state_data = json.loads(raw)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot parse --state: {exc}", EXIT_CONFIG) from exc
    state = State.at(_vector(state_data.get("p"), 3, "state.p"),
                     _vector(state_data.get("v", [0, 0, 0]), 3, "state.v"),
                     float(state_data.get("yaw", 0.0)))
    try:
        u_sp = Command.from_array(_vector([float(x) for x in command_text.split(",")], 4,
                                          "--command"))
    except ValueError as exc:
        raise CliError(f"cannot parse --command: {exc}", EXIT_CONFIG) from exc
    pts = _load_points(points_file)
    params = cfg.cbf

    payload: dict = {"points": int(len(pts)), "params": dataclasses.asdict(params)}
    try:
        if len(pts):
            ev = composite_h(pts, state, params)
            payload.update(h=ev.h, grad_p=ev.grad_p, grad_v=ev.grad_v, lie_f=ev.lie_f,
                           lie_g=ev.lie_g, theta=ev.theta)
        cmd, report = filter_once(u_sp, state, pts, params)
    except ValueError as exc:
        raise CliError(f"evaluation failed: {exc}", EXIT_RUNTIME) from exc
    payload.update(eta=report["eta"], intervened=report["intervened"],
                   filtered=cmd.as_array(), nominal=u_sp.as_array())

    def fmt(v):
        return np.array2string(np.asarray(v), precision=6, floatmode="maxprec")

    lines = [f"points      {len(pts)}"]
    if len(pts):
        lines += [f"h           {payload['h']:.9g}", f"grad_p      {fmt(payload['grad_p'])}",
                  f"grad_v      {fmt(payload['grad_v'])}", f"lie_f       {payload['lie_f']:.9g}",
                  f"lie_g       {fmt(payload['lie_g'])}", f"theta       {payload['theta']:.9g}",
                  f"eta         {payload['eta']:.9g}"]
    else:
        lines.append("no points: command passes through")
    lines += [f"nominal     {fmt(payload['nominal'])}",
              f"filtered    {fmt(payload['filtered'])}",
              f"intervened  {payload['intervened']}"]
    _emit(as_json, payload, lines)


@cli.command()
@click.option("--suite", "suites", multiple=True, type=click.Choice(SUITES + ("all",)),
              default=("all",), show_default=True, help="Suite(s) to run.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--runs", type=click.IntRange(min=1), default=2, show_default=True,
              help="Runs per density for the invariance suite.")
@json_option
def verify(suites, seed, runs, as_json):
    """Cross-check the math core against independent oracles."""
    names = SUITES if "all" in suites else tuple(dict.fromkeys(suites))
    results = []
    for name in names:
        kwargs = {"runs": runs} if name == "invariance" else {}
        try:
            results.append(run_suite(name, seed=seed, **kwargs))
        except Exception as exc:  # a crashing suite is a runtime error, not a mismatch
            raise CliError(f"suite {name} raised: {exc}", EXIT_RUNTIME) from exc
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status} {r.suite:<10} checked={r.checked:<6} failures={r.failures:<4} "
                     f"max_error={r.max_error:.3e} time={r.elapsed:.2f}s")
        lines += [f"     {note}" for note in r.notes]
    _emit(as_json, {"suites": [r.to_dict() for r in results]}, lines)
    if not all(r.passed for r in results):
        raise SystemExit(EXIT_VERIFY)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="ccbfnav", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_RUNTIME
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except SystemExit as exc:
        return int(exc.code or 0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
