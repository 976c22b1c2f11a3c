"""Composite control-barrier-function safety filter over range data, with a
corridor navigation simulator and ablation sweep harness."""

from .cbf import CbfParams, SafetyFilter, composite_h, safety_filter
from .dynamics import Command, SimConfig, State, step
from .harness import EpisodeConfig, SweepSpec, run_episode, run_sweep
from .sensor import PointSet, SensorConfig, scan, sparsify
from .world import World, WorldSpec, generate_world, signed_distance

__version__ = "0.1.0"

__all__ = [
    "CbfParams", "Command", "EpisodeConfig", "PointSet", "SafetyFilter", "SensorConfig",
    "SimConfig", "State", "SweepSpec", "World", "WorldSpec", "composite_h",
    "generate_world", "run_episode", "run_sweep", "safety_filter", "scan",
    "signed_distance", "sparsify", "step",
]
