"""TOML configuration loading with strict key checking and flag overrides."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import tomli

from .cbf import CbfParams
from .dynamics import SimConfig
from .harness import ConfigError, Rates, SweepSpec
from .policy import PolicyConfig
from .sensor import SensorConfig
from .world import WorldSpec

CONFIG_SCHEMA_VERSION = 1


def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _convert(args[0], value, where)
    if is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table")
        return build_dataclass(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        args = typing.get_args(tp)
        inner = args[0] if args else typing.Any
        return tuple(_convert(inner, v, where) for v in value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is bool and not isinstance(value, bool):
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if tp is str and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def build_dataclass(cls, data: dict, where: str = ""):
    """Instantiate ``cls`` from a nested dict, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls) if f.init}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or cls.__name__}: {sorted(unknown)}")
    kwargs = {name: _convert(hints[name], value, f"{where}.{name}".lstrip("."))
              for name, value in data.items()}
    return cls(**kwargs)


@dataclass(frozen=True)
class CliConfig:
    """Merged run configuration; TOML sections map one-to-one onto these fields."""

    world: WorldSpec = field(default_factory=WorldSpec)
    sim: SimConfig = field(default_factory=SimConfig)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    cbf: CbfParams = field(default_factory=CbfParams)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    rates: Rates = field(default_factory=Rates)
    episode: "EpisodeSection" = field(default_factory=lambda: EpisodeSection())
    sweep: "SweepSection" = field(default_factory=lambda: SweepSection())

    def validate(self) -> None:
        self.world.validate()
        self.sweep_spec().validate()

    def sweep_spec(self) -> SweepSpec:
        return SweepSpec(
            r_sep=self.sweep.r_sep, tau_d=self.sweep.tau_d, runs=self.sweep.runs,
            base_seed=self.sweep.base_seed, configs=self.sweep.configs, world=self.world,
            cbf=self.cbf, sim=self.sim, sensor=self.sensor, policy_cfg=self.policy,
            rates=self.rates, timeout=self.episode.timeout,
            success_radius=self.episode.success_radius, disturbance=self.episode.disturbance,
        )

    def to_dict(self) -> dict:
        return {"version": CONFIG_SCHEMA_VERSION, **dataclasses.asdict(self)}


@dataclass(frozen=True)
class EpisodeSection:
    timeout: float = 120.0
    success_radius: float = 1.0
    disturbance: str = "none"


@dataclass(frozen=True)
class SweepSection:
    r_sep: tuple[float, ...] = (1.5, 1.8, 2.0, 2.5, 3.0)
    tau_d: tuple[float, ...] = (0.0, 0.05, 0.10, 0.25)
    runs: int = 20
    base_seed: int = 0
    configs: tuple[str, ...] = ("waypoint+ccbf", "waypoint")


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> CliConfig:
    """Defaults, then the TOML file, then ``overrides`` (flags win)."""
    data: dict = {}
    if path is not None:
        try:
            data = tomli.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, tomli.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    data.pop("version", None)
    if overrides:
        data = _deep_merge(data, overrides)
    cfg = build_dataclass(CliConfig, data)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def set_dotted(overrides: dict, dotted: str, value) -> None:
    """``set_dotted(d, "cbf.kappa", 40)`` -> ``d["cbf"]["kappa"] = 40``."""
    *parents, leaf = dotted.split(".")
    node = overrides
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value
