import csv
import math

import pytest

from loadcouple import Planner, run_sweep
from loadcouple.core import SWEEP_COLUMNS, SweepResult, sweep_row, write_sweep
from loadcouple.exceptions import ConvergenceError, LoadCapError, ValidationError
from loadcouple.optimizer import solve_q
from loadcouple.schemas import (
    DemandCap,
    GridScenarioParams,
    Scenario,
    Settings,
    SolverSettings,
    UtilityWeights,
)
from loadcouple.scenario import build_scenario, save_scenario
from loadcouple.utils import rho_grid


@pytest.fixture
def planner(paired_scenario):
    settings = Settings(workers=2, solver=SolverSettings(load_max_iterations=20_000))
    return Planner(settings=settings, scenario=paired_scenario)


@pytest.fixture
def single_pair_planner(single_pair_topology):
    scenario = Scenario(
        topology=single_pair_topology,
        caps=DemandCap.uniform(single_pair_topology, 0.1),
        weights=UtilityWeights.uniform(single_pair_topology),
    )
    return Planner(scenario=scenario)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.reader(handle))


@pytest.mark.asyncio
async def test_sweep_rows_are_sorted_and_select_rho_star(planner):
    result = await planner.sweep("log", [0.75, 0.25, 0.5])
    assert [row.rho for row in result.rows] == [0.25, 0.5, 0.75]
    assert result.rho_star == 0.25
    assert all(row.converged and row.error is None for row in result.rows)
    assert result.rows[1].r_regular == pytest.approx(0.5, abs=1e-6)
    utilities = [row.sum_utility for row in result.rows]
    assert utilities == sorted(utilities)


@pytest.mark.asyncio
async def test_concurrent_sweep_matches_sequential_solves(planner):
    result = await planner.sweep("dlog", [0.3, 0.6])
    for row in result.rows:
        report = planner.solve("dlog", row.rho)
        assert row.sum_utility == report.sum_utility
        assert row.x_max == report.x_max
        assert row.iterations == report.newton_iterations


def test_rho_star_is_one_when_full_load_fits(single_pair_planner):
    result = single_pair_planner.sweep_sync("log", [0.5])
    assert result.rho_star == 1.0
    assert [row.rho for row in result.rows] == [0.5]


def test_rho_star_is_missing_when_nothing_fits(planner, tmp_path):
    result = planner.sweep_sync("log", [0.25, 0.5], load_epsilon=0.99)
    assert result.rho_star is None
    path = tmp_path / "sweep.csv"
    write_sweep(result, path)
    assert read_csv(path)[-2][:2] == ["rho_star", "nan"]


def test_failed_rows_are_kept(planner, monkeypatch):
    def flaky(spec):
        if spec.rho == 0.5:
            raise ConvergenceError("Newton system could not be regularized")
        return solve_q(spec)

    monkeypatch.setattr("loadcouple.core.solve_q", flaky)
    result = planner.sweep_sync("log", [0.25, 0.5])
    failed = result.rows[1]
    assert failed.rho == 0.5
    assert not failed.converged
    assert math.isnan(failed.sum_utility)
    assert "regularized" in failed.error
    assert result.rho_star == 0.25


def test_csv_layout(planner, tmp_path):
    result = planner.sweep_sync("log", [0.25, 0.5, 0.75])
    path = tmp_path / "sweep.csv"
    write_sweep(result, path)
    rows = read_csv(path)
    assert tuple(rows[0]) == SWEEP_COLUMNS
    assert len(rows) == 6
    assert [float(row[0]) for row in rows[1:4]] == [0.25, 0.5, 0.75]
    assert float(rows[1][1]) == result.rows[0].sum_utility
    assert rows[1][5] == "true"
    assert rows[4] == ["rho_star", "0.25", "", "", "", "", "", ""]
    assert rows[5] == ["seed", "11", "", "", "", "", "", ""]


def test_summary_row_of_empty_result():
    rows = SweepResult(utility="log", rows=[], rho_star=1.0).csv_rows()
    assert rows == [
        ["rho_star", 1.0, None, None, None, None, None, None],
        ["seed", None, None, None, None, None, None, None],
    ]


def test_merged_radius_fills_both_columns(paired_spec):
    report = solve_q(paired_spec).model_copy(update={"radii": {"merged": 0.3}})
    row = sweep_row(1.0, report, wall_ms=1.5)
    assert row.r_regular == row.r_complementary == 0.3


@pytest.mark.asyncio
async def test_concurrent_search_matches_sequential(planner):
    sequential = planner.search("log", step=0.05)
    concurrent = await planner.search_concurrent("log", step=0.05)
    assert sequential[0] == concurrent[0] == 0.25
    assert sequential[1].sum_utility == concurrent[1].sum_utility


@pytest.mark.asyncio
async def test_concurrent_search_without_qualifying_value(planner):
    with pytest.raises(LoadCapError):
        await planner.search_concurrent("log", step=0.1, load_epsilon=0.99)


def test_problem_applies_overrides(planner):
    spec = planner.problem("dlog", rho=0.4, load_epsilon=0.1)
    assert (spec.utility, spec.rho, spec.solver.load_epsilon) == ("dlog", 0.4, 0.1)
    assert spec.solver.load_max_iterations == 20_000
    with pytest.raises(ValidationError):
        planner.problem("cubic")


def test_run_sweep_from_file(paired_scenario, tmp_path):
    scenario_path = tmp_path / "scenario.json"
    save_scenario(paired_scenario, scenario_path)
    out = tmp_path / "sweep.csv"
    result = run_sweep(scenario_path, "log", [0.25, 0.5], out)
    assert result.rho_star == 0.25
    assert len(read_csv(out)) == 5
    assert result.seed == 11


@pytest.mark.parametrize("grid", [[], [0.0, 0.5], [1.5]])
def test_run_sweep_rejects_bad_grids(tmp_path, grid):
    with pytest.raises(ValueError):
        run_sweep(tmp_path / "unused.json", "log", grid, tmp_path / "sweep.csv")


def test_solve_reports_carry_the_scenario_seed(planner):
    assert planner.solve("log", 0.5).seed == 11
    assert planner.problem("log", seed=3).seed == 3


def test_sum_utility_strictly_increases_when_overloaded(paired_scenario):
    # Caps of 10 keep both radius constraints active for every rho < 1, where
    # U_sum = log(d1 d2) + log(d'1 d'2) = log(4 rho^2) + log(25 rho^2).
    scenario = paired_scenario.model_copy(update={"caps": DemandCap(caps=[10.0, 10.0])})
    planner = Planner(
        settings=Settings(workers=2, solver=SolverSettings(load_max_iterations=20_000)),
        scenario=scenario,
    )
    result = planner.sweep_sync("log", rho_grid(0.01))
    values = [row.sum_utility for row in result.rows]
    assert len(values) == 99
    assert all(b - a > 1e-9 for a, b in zip(values, values[1:]))
    for row in result.rows[::7]:
        assert row.sum_utility == pytest.approx(math.log(100 * row.rho**4), abs=1e-5)


@pytest.mark.slow
def test_sum_utility_strictly_increases_on_overloaded_grid():
    scenario = build_scenario(GridScenarioParams(rows=2, cols=2, cap=10.0, seed=0))
    planner = Planner(settings=Settings(workers=4), scenario=scenario)
    result = planner.sweep_sync("log", rho_grid(0.01))
    assert all(row.error is None for row in result.rows)
    values = [row.sum_utility for row in result.rows]
    assert all(b - a > 1e-9 for a, b in zip(values, values[1:]))
    assert result.seed == 0
