import csv
import json

import pytest
from typer.testing import CliRunner

from loadcouple.cli import app
from loadcouple.schemas import GridScenarioParams
from loadcouple.scenario import build_scenario, save_scenario

runner = CliRunner()


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "scenario.json"
    save_scenario(build_scenario(GridScenarioParams(rows=1, cols=1, seed=0)), path)
    return path


@pytest.fixture
def demand_file(tmp_path):
    def write(regular, complementary):
        path = tmp_path / "demands.json"
        path.write_text(json.dumps({"regular": regular, "complementary": complementary}))
        return path

    return write


def test_scenario_gen(tmp_path):
    out = tmp_path / "generated.json"
    result = runner.invoke(app, ["scenario", "gen", "--rows", "1", "--cols", "2", "--seed", "5", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "Scenario generated" in result.output
    raw = json.loads(out.read_text())
    assert raw["schema_version"] == 1
    assert raw["seed"] == 5
    assert len(raw["topology"]["users"]) == 40


def test_scenario_gen_rejects_bad_parameters(tmp_path):
    result = runner.invoke(app, ["scenario", "gen", "--per-macro", "3", "--out", str(tmp_path / "s.json")])
    assert result.exit_code == 2


def test_validate(scenario_file):
    result = runner.invoke(app, ["validate", "--scenario", str(scenario_file)])
    assert result.exit_code == 0, result.output
    assert "valid: 1 regular cells, 4 complementary cells, 20 users" in result.output


def test_validate_lists_violations(scenario_file):
    raw = json.loads(scenario_file.read_text())
    raw["topology"]["regular_powers"] = [-1.0]
    raw["caps"]["caps"][3] = -0.5
    scenario_file.write_text(json.dumps(raw))
    result = runner.invoke(app, ["validate", "-s", str(scenario_file)])
    assert result.exit_code == 2
    assert "2 violation(s)" in result.output
    assert "regular_cell[0]" in result.output
    assert "user[3]" in result.output


def test_validate_malformed_file(scenario_file):
    scenario_file.write_text('{"schema_version": 1, "topology": ')
    result = runner.invoke(app, ["validate", "-s", str(scenario_file)])
    assert result.exit_code == 4
    assert "Malformed JSON" in result.output


def test_missing_scenario_file(tmp_path, demand_file):
    demands = demand_file([0.05], [0.05] * 4)
    result = runner.invoke(app, ["feasibility", "-s", str(tmp_path / "nope.json"), "-d", str(demands)])
    assert result.exit_code == 4


def test_feasibility(scenario_file, demand_file):
    demands = demand_file([0.05], [0.05] * 4)
    result = runner.invoke(app, ["feasibility", "-s", str(scenario_file), "-d", str(demands)])
    assert result.exit_code == 0, result.output
    assert "radius[regular] = 0.0" in result.output
    assert "radius[complementary] = " in result.output
    assert "feasible" in result.output


def test_infeasible_demands_exit_three(scenario_file, demand_file):
    demands = demand_file([1.0], [50.0] * 4)
    result = runner.invoke(app, ["feasibility", "-s", str(scenario_file), "-d", str(demands)])
    assert result.exit_code == 3
    assert "infeasible" in result.output


def test_zero_demand_is_a_validation_error(scenario_file, demand_file):
    demands = demand_file([0.05], [0.05, 0.0, 0.05, 0.05])
    result = runner.invoke(app, ["feasibility", "-s", str(scenario_file), "-d", str(demands)])
    assert result.exit_code == 2


@pytest.mark.parametrize("schedule", ["sync", "async"])
def test_load(scenario_file, demand_file, schedule):
    demands = demand_file([0.05], [0.05] * 4)
    result = runner.invoke(
        app, ["load", "-s", str(scenario_file), "-d", str(demands), "--schedule", schedule, "--order", "4,3,2,1,0"]
    )
    assert result.exit_code == 0, result.output
    assert "x_max = " in result.output
    assert "bs0" in result.output and "ap3" in result.output


def test_load_rejects_partial_order(scenario_file, demand_file):
    demands = demand_file([0.05], [0.05] * 4)
    result = runner.invoke(
        app, ["load", "-s", str(scenario_file), "-d", str(demands), "--schedule", "async", "--order", "0,1"]
    )
    assert result.exit_code == 2


def test_load_divergence_exit_three(scenario_file, demand_file):
    demands = demand_file([1.0], [50.0] * 4)
    result = runner.invoke(app, ["load", "-s", str(scenario_file), "-d", str(demands)])
    assert result.exit_code == 3
    assert "diverged" in result.output


def test_solve_writes_report(scenario_file, tmp_path):
    out = tmp_path / "report.json"
    result = runner.invoke(app, ["solve", "-s", str(scenario_file), "-u", "log", "--rho", "0.8", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "utility = log" in result.output
    assert "rho = 0.8" in result.output
    report = json.loads(out.read_text())
    assert report["rho"] == 0.8
    assert report["seed"] == 0
    assert len(report["served_demand"]) == 20
    assert max(report["served_demand"]) <= 0.1 + 1e-9


def test_solve_with_search(scenario_file):
    result = runner.invoke(app, ["solve", "-s", str(scenario_file), "--search", "--step", "0.1", "--workers", "2"])
    assert result.exit_code == 0, result.output
    assert "x_max = " in result.output


def test_solve_unknown_utility(scenario_file):
    result = runner.invoke(app, ["solve", "-s", str(scenario_file), "-u", "cubic"])
    assert result.exit_code == 2
    assert "cubic" in result.output


def test_sweep_writes_csv(scenario_file, tmp_path):
    out = tmp_path / "sweep.csv"
    result = runner.invoke(
        app, ["sweep", "-s", str(scenario_file), "-u", "dlog", "--rho-grid", "0.5,1", "--out", str(out), "--workers", "2"]
    )
    assert result.exit_code == 0, result.output
    assert "rows = 2" in result.output
    assert "failed = 0" in result.output
    with open(out, newline="") as handle:
        rows = list(csv.reader(handle))
    assert rows[0][0] == "rho"
    assert [row[0] for row in rows[1:]] == ["0.5", "1.0", "rho_star", "seed"]
    assert rows[-1][1] == "0"


def test_sweep_rejects_grid_outside_unit_interval(scenario_file, tmp_path):
    result = runner.invoke(
        app, ["sweep", "-s", str(scenario_file), "--rho-grid", "0:0.5:1", "--out", str(tmp_path / "sweep.csv")]
    )
    assert result.exit_code == 2
    assert not (tmp_path / "sweep.csv").exists()


def test_probe(scenario_file):
    result = runner.invoke(app, ["probe", "-s", str(scenario_file), "-u", "log", "--trials", "200", "--rho", "0.9"])
    assert result.exit_code == 0, result.output
    assert '"network": "complementary"' in result.output
    assert '"violations": 0' in result.output
    assert '"seed": 0' in result.output


def test_probe_unknown_network(scenario_file):
    result = runner.invoke(app, ["probe", "-s", str(scenario_file), "--network", "merged"])
    assert result.exit_code == 2


@pytest.mark.parametrize(
    "utility, verdict",
    [("log", "not-admissible"), ("dlog", "strictly-admissible"), ("lin", "not-admissible")],
)
def test_admissibility(utility, verdict):
    result = runner.invoke(app, ["admissibility", "-u", utility])
    assert result.exit_code == 0, result.output
    assert f"verdict = {verdict}" in result.output
    assert ("criterion vanishes" in result.output) == (utility == "log")


def test_config_file(tmp_path):
    config = tmp_path / "settings.json"
    config.write_text(json.dumps({"workers": 2, "solver": {"admissibility_tolerance": 1e-6}}))
    result = runner.invoke(app, ["--config", str(config), "admissibility", "-u", "dlog"])
    assert result.exit_code == 0, result.output

    result = runner.invoke(app, ["--config", str(tmp_path / "missing.json"), "admissibility"])
    assert result.exit_code == 4

    config.write_text(json.dumps({"workers": 0}))
    result = runner.invoke(app, ["--config", str(config), "admissibility"])
    assert result.exit_code == 2
