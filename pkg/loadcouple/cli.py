import asyncio
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional

import pydantic
import typer
from rich.console import Console
from rich.markup import escape
from rich.panel import Panel
from rich.table import Table

from .core import Planner, run_sweep
from .exceptions import InfeasibleError, LoadCoupleError, ScenarioFormatError, ValidationError
from .loads import fixed_point_load
from .log_config import setup_logging
from .oracles import ProbeRegion, convexity_probe
from .scenario import build_scenario, load_demands, load_scenario, save_scenario
from .schemas import (
    GridScenarioParams,
    IterationSchedule,
    Mode,
    ProblemSpec,
    ScheduleKind,
    Settings,
)
from .serialization import serialize, write_json
from .spectral import feasibility_margin, network_radii
from .utility import admissibility_check
from .utils import parse_rho_grid

# Initialize Typer app
app = typer.Typer(
    name="lc",
    help="loadcouple: load coupling analysis and demand planning for two-tier cellular networks",
    add_completion=False,
)
scenario_app = typer.Typer(help="Generate grid scenarios", add_completion=False)
app.add_typer(scenario_app, name="scenario")

# Initialize Rich console
console = Console()

state: Dict[str, Settings] = {"settings": Settings()}


def get_settings() -> Settings:
    return state["settings"]


@contextmanager
def handle_errors() -> Iterator[None]:
    """Print errors the same way for every command and exit with their code."""
    try:
        yield
    except LoadCoupleError as e:
        console.print(f"[red]Error:[/red] {escape(str(e))}")
        raise typer.Exit(e.exit_code)
    except pydantic.ValidationError as e:
        console.print(f"[red]Error:[/red] {escape(str(e))}")
        raise typer.Exit(ValidationError.exit_code)
    except OSError as e:
        console.print(f"[red]Error:[/red] {escape(str(e))}")
        raise typer.Exit(ScenarioFormatError.exit_code)
    except ValueError as e:
        console.print(f"[red]Error:[/red] {escape(str(e))}")
        raise typer.Exit(ValidationError.exit_code)


@app.callback()
def main(
    debug: bool = typer.Option(False, "--debug", help="Enable debug logging"),
    log_path: Optional[str] = typer.Option(None, "--log-path", help="Also write logs to this file"),
    config: Optional[Path] = typer.Option(
        None,
        "--config",
        "-c",
        help="JSON settings file",
    ),
) -> None:
    """Configure settings and logging shared by every command."""
    with handle_errors():
        settings = Settings()
        if config is not None:
            if not config.exists():
                raise ScenarioFormatError(f"Configuration file not found: {config}")
            settings = Settings.model_validate_json(config.read_text(encoding="utf-8"))
        updates = {}
        if debug:
            updates["debug"] = True
        if log_path:
            updates["log_path"] = log_path
        state["settings"] = settings.model_copy(update=updates)
        setup_logging(state["settings"].log_path, state["settings"].debug)


@scenario_app.command("gen")
def scenario_gen(
    out: Path = typer.Option(..., "--out", "-o", help="Scenario file to write"),
    rows: int = typer.Option(3, help="Macro grid rows"),
    cols: int = typer.Option(3, help="Macro grid columns"),
    side: float = typer.Option(2.0, help="Macro cell side length"),
    per_macro: int = typer.Option(4, help="Complementary cells per macro cell"),
    users_per_cell: int = typer.Option(5, help="Users per complementary cell"),
    kappa: float = typer.Option(4.0, help="Path-loss exponent"),
    macro_power: float = typer.Option(100.0, help="Regular cell transmit power"),
    complementary_power: float = typer.Option(1.0, help="Complementary cell transmit power"),
    noise: float = typer.Option(0.01, help="Noise power"),
    weight: float = typer.Option(1.0, help="Per-user weight on the regular side"),
    complementary_weight: float = typer.Option(0.25, help="Per-user weight on the complementary side"),
    cap: float = typer.Option(0.1, help="Demand cap per user"),
    mode: Mode = typer.Option(Mode.WIFI, help="Complementary network mode"),
    seed: int = typer.Option(0, help="Seed of the user placement"),
) -> None:
    """Generate a seeded grid scenario"""
    with handle_errors():
        params = GridScenarioParams(
            rows=rows,
            cols=cols,
            side=side,
            per_macro=per_macro,
            users_per_cell=users_per_cell,
            kappa=kappa,
            macro_power=macro_power,
            complementary_power=complementary_power,
            noise=noise,
            weight=weight,
            complementary_weight=complementary_weight,
            cap=cap,
            mode=mode,
            seed=seed,
        )
        scenario = build_scenario(params)
        save_scenario(scenario, out)
        topology = scenario.topology
        console.print(
            Panel.fit(
                "[green]✓[/green] Scenario generated\n\n"
                f"[bold]File:[/bold] {out}\n"
                f"[bold]Mode:[/bold] {topology.mode.value}\n"
                f"[bold]Regular cells:[/bold] {topology.n}\n"
                f"[bold]Complementary cells:[/bold] {topology.n_complementary}\n"
                f"[bold]Users:[/bold] {topology.n_users}",
                title="Scenario",
                border_style="green",
            )
        )


@app.command()
def validate(
    scenario: Path = typer.Option(..., "--scenario", "-s", help="Scenario file"),
) -> None:
    """Check a scenario file against the topology invariants"""
    try:
        loaded = load_scenario(scenario)
    except ValidationError as e:
        table = Table(title=f"{len(e.issues)} violation(s)")
        table.add_column("Entity")
        table.add_column("Field")
        table.add_column("Message")
        for issue in e.issues:
            table.add_row(escape(issue.entity), escape(issue.field), escape(issue.message))
        console.print(table)
        raise typer.Exit(e.exit_code)
    except LoadCoupleError as e:
        console.print(f"[red]Error:[/red] {escape(str(e))}")
        raise typer.Exit(e.exit_code)
    topology = loaded.topology
    console.print(
        f"[green]valid[/green]: {topology.n} regular cells, "
        f"{topology.n_complementary} complementary cells, {topology.n_users} users"
    )


@app.command()
def feasibility(
    scenario: Path = typer.Option(..., "--scenario", "-s", help="Scenario file"),
    demands: Path = typer.Option(..., "--demands", "-d", help="Demand file"),
) -> None:
    """Print the spectral radius of every network and the feasibility verdict"""
    with handle_errors():
        settings = get_settings().solver
        loaded = load_scenario(scenario)
        allocation = load_demands(demands)
        result = feasibility_margin(loaded.topology, allocation, settings)
        for name, radius in network_radii(loaded.topology, allocation, settings).items():
            console.print(escape(f"radius[{name}] = {radius!r}"))
        console.print(f"radius = {result.radius!r}")
    if not result.feasible:
        console.print("[red]infeasible[/red]")
        raise typer.Exit(InfeasibleError.exit_code)
    console.print("[green]feasible[/green]")


@app.command()
def load(
    scenario: Path = typer.Option(..., "--scenario", "-s", help="Scenario file"),
    demands: Path = typer.Option(..., "--demands", "-d", help="Demand file"),
    schedule: ScheduleKind = typer.Option(ScheduleKind.SYNCHRONOUS, help="Iteration schedule"),
    order: Optional[str] = typer.Option(
        None, help="Comma-separated global cell order for the asynchronous schedule"
    ),
) -> None:
    """Solve the load coupling equation and print per-cell loads"""
    with handle_errors():
        loaded = load_scenario(scenario)
        allocation = load_demands(demands)
        cell_order: Optional[List[int]] = None
        if order:
            cell_order = [int(part) for part in order.split(",") if part.strip()]
        plan = IterationSchedule(kind=schedule, order=cell_order)
        solution = fixed_point_load(loaded.topology, allocation, plan, settings=get_settings().solver)

        topology = loaded.topology
        table = Table(title=f"Loads ({solution.iterations} iterations)")
        table.add_column("Cell")
        table.add_column("Network")
        table.add_column("Load", justify="right")
        for cell, value in zip(topology.regular_cells, solution.load.regular):
            table.add_row(cell, "regular", repr(value))
        for cell, value in zip(topology.complementary_cells, solution.load.complementary):
            table.add_row(cell, "complementary", repr(value))
        console.print(table)
        console.print(f"x_max = {solution.load.max!r}")


@app.command()
def solve(
    scenario: Path = typer.Option(..., "--scenario", "-s", help="Scenario file"),
    utility: str = typer.Option("log", "--utility", "-u", help="lin, log, dlog or a registered utility"),
    rho: float = typer.Option(1.0, help="Spectral radius bound"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Report file to write"),
    search: bool = typer.Option(False, "--search", help="Search the largest rho keeping loads within the cap"),
    step: Optional[float] = typer.Option(None, help="Grid step of the rho search"),
    load_epsilon: Optional[float] = typer.Option(None, help="Required margin eps in x_max <= 1 - eps"),
    workers: Optional[int] = typer.Option(None, help="Concurrent solves during the rho search"),
) -> None:
    """Maximize the weighted sum utility of a scenario"""
    with handle_errors():
        settings = get_settings()
        if workers is not None:
            settings = settings.model_copy(update={"workers": workers})
        planner = Planner(settings=settings, scenario=load_scenario(scenario))
        if search:
            if settings.workers > 1:
                rho, report = asyncio.run(planner.search_concurrent(utility, step, load_epsilon))
            else:
                rho, report = planner.search(utility, step, load_epsilon)
        else:
            report = planner.solve(utility, rho, load_epsilon=load_epsilon)

        if out is not None:
            write_json(report.model_dump(mode="json"), out)
        console.print(f"utility = {report.utility}")
        console.print(f"rho = {report.rho!r}")
        console.print(f"U_sum = {report.sum_utility!r}")
        console.print(f"x_max = {report.x_max!r}")
        for name, radius in report.radii.items():
            console.print(escape(f"radius[{name}] = {radius!r}"))
        if report.possibly_local:
            console.print("[yellow]possibly local optimum[/yellow]")
        if report.possibly_non_unique:
            console.print("[yellow]optimum possibly non-unique[/yellow]")


@app.command()
def sweep(
    scenario: Path = typer.Option(..., "--scenario", "-s", help="Scenario file"),
    utility: str = typer.Option("log", "--utility", "-u", help="lin, log, dlog or a registered utility"),
    rho_grid: str = typer.Option("0.005:0.005:0.995", "--rho-grid", help="start:step:stop or comma list"),
    out: Path = typer.Option(..., "--out", "-o", help="CSV file to write"),
    workers: Optional[int] = typer.Option(None, help="Concurrent solves"),
    load_epsilon: Optional[float] = typer.Option(None, help="Required margin eps in x_max <= 1 - eps"),
) -> None:
    """Solve over a rho grid and write one CSV row per rho"""
    with handle_errors():
        grid = parse_rho_grid(rho_grid)
        settings = get_settings()
        if workers is not None:
            settings = settings.model_copy(update={"workers": workers})
        result = run_sweep(scenario, utility, grid, out, settings=settings, load_epsilon=load_epsilon)
        failures = sum(1 for row in result.rows if row.error is not None)
        console.print(f"rows = {len(result.rows)}")
        console.print(f"failed = {failures}")
        console.print(f"rho_star = {result.rho_star!r}")


@app.command()
def probe(
    scenario: Path = typer.Option(..., "--scenario", "-s", help="Scenario file"),
    utility: str = typer.Option("log", "--utility", "-u", help="lin, log, dlog or a registered utility"),
    trials: int = typer.Option(10_000, help="Number of sampled point pairs"),
    seed: int = typer.Option(0, help="Seed of the sampler"),
    rho: float = typer.Option(1.0, help="Spectral radius bound"),
    region: Optional[ProbeRegion] = typer.Option(None, help="Probe the feasible set or its complement"),
    network: Optional[str] = typer.Option(None, help="Network to probe"),
) -> None:
    """Count convexity violations of the transformed feasible set"""
    with handle_errors():
        loaded = load_scenario(scenario)
        spec = ProblemSpec.from_scenario(loaded, utility=utility, rho=rho, solver=get_settings().solver)
        report = convexity_probe(spec, trials=trials, region=region, network=network, seed=seed)
        console.print_json(serialize(report))


@app.command()
def admissibility(
    utility: str = typer.Option("log", "--utility", "-u", help="lin, log, dlog or a registered utility"),
) -> None:
    """Evaluate the strict admissibility criterion of a utility"""
    with handle_errors():
        report = admissibility_check(utility, tolerance=get_settings().solver.admissibility_tolerance)
        console.print(f"utility = {report.utility}")
        console.print(f"verdict = {report.verdict.value}")
        if report.on_boundary:
            console.print("criterion vanishes on the grid (convex, not strictly)")
        if report.max_criterion is not None:
            console.print(f"max_criterion = {report.max_criterion!r}")
