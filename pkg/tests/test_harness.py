import json
import math
from dataclasses import replace

import numpy as np
import pytest

from ccbfnav.dynamics import SimConfig
from ccbfnav.harness import (
    OUTCOMES,
    TRACE_COLUMNS,
    ConfigError,
    EpisodeConfig,
    Rates,
    SweepReport,
    SweepSpec,
    Trace,
    classify_trace,
    export_report,
    load_cells_csv,
    parse_config_name,
    run_episode,
    run_sweep,
    stable_seed,
    trace_filename,
)
from ccbfnav.world import WorldSpec, empty_world, generate_world
from oracles import naive_signed_distance

SHORT_WORLD = WorldSpec(corridor_length=14.0, r_sep=1.5)


def _recount_clearance(world, trace, robot_radius):
    pts = np.column_stack([trace.column("px"), trace.column("py"), trace.column("pz")])
    return min(naive_signed_distance(world.width, world.height, world.centers, world.radii, p)
               for p in pts) - robot_radius


def test_empty_world_filter_off_succeeds():
    world = empty_world(length=20.0)
    res = run_episode(EpisodeConfig(world=world, filter_enabled=False, record_trace=True))
    assert res.outcome == "success"
    assert classify_trace(res.trace) == "success"
    assert res.trace.data.shape[1] == len(TRACE_COLUMNS)
    assert res.min_clearance > 0
    assert res.max_speed <= 2.0 + 1e-9
    assert res.path_length >= np.linalg.norm(world.goal - world.start_position) - 1.0 - 1e-9


def test_empty_world_filter_on_succeeds():
    res = run_episode(EpisodeConfig(world=empty_world(length=20.0), filter_enabled=True))
    assert res.outcome == "success"


def test_dense_world_filter_off_crashes_mostly():
    spec = SweepSpec(world=SHORT_WORLD)
    crashes = 0
    for run in range(20):
        ep = replace(spec.episode_config(1.5, 0.0, "waypoint", run), timeout=30.0)
        crashes += run_episode(ep).outcome == "crash"
    assert crashes >= 18


def test_dense_world_filter_on_no_crash_and_clearance_recount():
    spec = SweepSpec(world=SHORT_WORLD)
    for run in range(3):
        ep = replace(spec.episode_config(1.5, 0.0, "waypoint+ccbf", run), timeout=20.0,
                     record_trace=True)
        world = generate_world(ep.world_spec)
        res = run_episode(ep)
        assert res.outcome in ("success", "stagnation")
        assert classify_trace(res.trace) == res.outcome
        assert res.min_clearance == pytest.approx(
            _recount_clearance(world, res.trace, ep.sim.robot_radius), abs=1e-12)
        assert res.interventions > 0


def test_crash_trace_agrees_with_outcome():
    spec = SweepSpec(world=SHORT_WORLD)
    ep = replace(spec.episode_config(1.5, 0.0, "waypoint", 0), timeout=30.0, record_trace=True)
    res = run_episode(ep)
    assert res.outcome == "crash"
    assert classify_trace(res.trace) == "crash"
    assert res.min_clearance <= 0
    # The crash tick is the last row and the only non-positive clearance.
    clear = res.trace.column("clearance")
    assert clear[-1] <= 0 and np.all(clear[:-1] > 0)
    assert res.trace.column("reward")[-1] == -10.0
    world = generate_world(ep.world_spec)
    assert res.min_clearance == pytest.approx(
        _recount_clearance(world, res.trace, ep.sim.robot_radius), abs=1e-12)


def test_episode_is_deterministic():
    spec = SweepSpec(world=SHORT_WORLD, disturbance="random",
                     sim=SimConfig(disturbance_bound=0.3))
    ep = replace(spec.episode_config(2.0, 0.05, "waypoint+ccbf", 1), timeout=5.0,
                 record_trace=True)
    a, b = run_episode(ep), run_episode(ep)
    assert a == b
    np.testing.assert_array_equal(a.trace.data, b.trace.data)


def test_timeout_gives_stagnation():
    res = run_episode(EpisodeConfig(world=empty_world(length=40.0), filter_enabled=False,
                                    timeout=2.0, record_trace=True))
    assert res.outcome == "stagnation"
    assert res.elapsed == pytest.approx(2.0)
    assert len(res.trace.data) == 400


def test_episode_config_validation():
    world = empty_world()
    with pytest.raises(ConfigError):
        EpisodeConfig().validate()
    with pytest.raises(ConfigError):
        EpisodeConfig(world=world, world_spec=WorldSpec()).validate()
    with pytest.raises(ConfigError):
        EpisodeConfig(world=world, policy="nmpc").validate()
    with pytest.raises(ConfigError):
        EpisodeConfig(world=world, timeout=0.0).validate()
    with pytest.raises(ConfigError):
        EpisodeConfig(world=world, rates=Rates(sensor=30.0)).validate()
    with pytest.raises(ConfigError):
        EpisodeConfig(world=world, disturbance="random").validate()
    with pytest.raises(ConfigError):
        EpisodeConfig(world=world, disturbance="gusty",
                      sim=SimConfig(disturbance_bound=0.1)).validate()
    assert EpisodeConfig(world=world).dividers() == (20, 5, 4)


def test_stable_seed_and_config_names():
    assert stable_seed(0, "world", 1.5, 3) == stable_seed(0, "world", 1.5, 3)
    assert stable_seed(0, "world", 1.5, 3) != stable_seed(0, "world", 1.5, 4)
    assert 0 <= stable_seed("x") < 2**64
    assert parse_config_name("waypoint+ccbf") == ("waypoint", True)
    assert parse_config_name("waypoint") == ("waypoint", False)
    for bad in ("nmpc", "waypoint+mpc"):
        with pytest.raises(ConfigError):
            parse_config_name(bad)


def test_sweep_seeds_do_not_depend_on_grid():
    small = SweepSpec(r_sep=(2.0,), tau_d=(0.1,))
    large = SweepSpec(r_sep=(1.5, 2.0), tau_d=(0.0, 0.1, 0.25))
    assert small.episode_config(2.0, 0.1, "waypoint", 4) == large.episode_config(
        2.0, 0.1, "waypoint", 4)


def test_sweep_validation():
    with pytest.raises(ConfigError):
        SweepSpec(r_sep=()).validate()
    with pytest.raises(ConfigError):
        SweepSpec(runs=0).validate()
    with pytest.raises(ConfigError):
        SweepSpec(tau_d=(-0.1,)).validate()
    with pytest.raises(ConfigError):
        SweepSpec(configs=("random",)).validate()


@pytest.fixture(scope="module")
def small_sweep(tmp_path_factory):
    spec = SweepSpec(r_sep=(1.5, 3.0), tau_d=(0.0,), runs=3, base_seed=9,
                     world=SHORT_WORLD, timeout=15.0)
    trace_dir = tmp_path_factory.mktemp("traces")
    seen = []
    report = run_sweep(spec, workers=1, trace_dir=trace_dir, progress=seen.append)
    return spec, report, trace_dir, seen


def test_sweep_shape_and_rates(small_sweep):
    spec, report, _, seen = small_sweep
    assert len(report.cells) == 2 * 1 * 2
    assert len(report.episodes) == len(seen) == 12
    for cell in report.cells:
        assert cell.n == 3
        assert cell.success + cell.stagnation + cell.crash == cell.n
        assert math.fsum(cell.rate(o) for o in OUTCOMES) == 1.0
    for r_sep in spec.r_sep:
        assert report.cell(r_sep, 0.0, "waypoint+ccbf").crash_rate <= \
            report.cell(r_sep, 0.0, "waypoint").crash_rate
    with pytest.raises(KeyError):
        report.cell(9.9, 0.0, "waypoint")


def test_sweep_rates_recount_from_traces(small_sweep):
    spec, report, trace_dir, _ = small_sweep
    for cell in report.cells:
        outcomes = [classify_trace(Trace.from_csv(
            trace_dir / trace_filename(cell.r_sep, cell.tau_d, cell.config, run)),
            spec.success_radius) for run in range(spec.runs)]
        assert outcomes.count("crash") == cell.crash
        assert outcomes.count("success") == cell.success
        assert outcomes.count("stagnation") == cell.stagnation


def test_trace_csv_round_trip(small_sweep, tmp_path):
    _, _, trace_dir, _ = small_sweep
    path = trace_dir / trace_filename(3.0, 0.0, "waypoint+ccbf", 0)
    trace = Trace.from_csv(path)
    trace.to_csv(tmp_path / "copy.csv")
    assert (tmp_path / "copy.csv").read_bytes() == path.read_bytes()
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        Trace.from_csv(tmp_path / "bad.csv")


def test_sweep_rerun_is_identical(small_sweep):
    spec, report, _, _ = small_sweep
    again = run_sweep(replace(spec, r_sep=(3.0,), configs=("waypoint+ccbf",)))
    mine = [e for e in report.episodes if e.r_sep == 3.0 and e.config == "waypoint+ccbf"]
    assert list(again.episodes) == mine


def test_report_json_round_trip(small_sweep):
    _, report, _, _ = small_sweep
    data = json.loads(report.to_json())
    assert SweepReport.from_dict(data) == report
    with pytest.raises(ValueError):
        SweepReport.from_dict({**data, "version": 99})


def test_export_report_files(small_sweep, tmp_path):
    _, report, _, _ = small_sweep
    written = export_report(report, tmp_path / "out")
    names = sorted(p.name for p in written)
    assert names == ["cells.csv", "episodes.csv", "plot_data.csv", "summary.json"]
    rows = load_cells_csv(tmp_path / "out" / "cells.csv")
    assert len(rows) == len(report.cells)
    assert list(rows[0]) == ["r_sep", "tau_d", "config", "success_rate", "crash_rate",
                             "stagnation_rate", "n"]
    for row, cell in zip(rows, report.cells):
        assert float(row["crash_rate"]) == cell.crash_rate
        assert int(row["n"]) == cell.n
    plot = (tmp_path / "out" / "plot_data.csv").read_text().splitlines()
    assert len(plot) == 1 + len(OUTCOMES) * len(report.cells)
    two = SweepReport(report.spec, report.cells[:2], report.episodes)
    export_report(two, tmp_path / "two", formats=("csv",))
    assert len(load_cells_csv(tmp_path / "two" / "cells.csv")) == 2


def test_export_report_io_error_has_path(small_sweep, tmp_path):
    _, report, _, _ = small_sweep
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        export_report(report, blocker / "sub")
