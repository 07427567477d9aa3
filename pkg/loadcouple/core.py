import asyncio
import logging
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field

from .exceptions import LoadCapError, LoadCoupleError
from .log_config import setup_logging
from .optimizer import load_cap_met, rho_search, select_rho, solve_q
from .scenario import load_scenario
from .schemas import ProblemSpec, Scenario, Settings, SolveReport, SweepRow
from .serialization import write_csv
from .utility import get_utility
from .utils import format_seconds, rho_grid

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = (
    "rho",
    "U_sum",
    "x_max",
    "r_regular",
    "r_complementary",
    "converged",
    "iterations",
    "wall_ms",
)


def _radius(report: SolveReport, name: str) -> float:
    # SmallCell mode has a single merged network that stands in for both columns.
    if name in report.radii:
        return report.radii[name]
    return report.radii.get("merged", float("nan"))


def sweep_row(rho: float, report: SolveReport, wall_ms: float) -> SweepRow:
    return SweepRow(
        rho=rho,
        sum_utility=report.sum_utility,
        x_max=report.x_max,
        r_regular=_radius(report, "regular"),
        r_complementary=_radius(report, "complementary"),
        converged=report.converged and report.load_converged,
        iterations=report.newton_iterations,
        wall_ms=wall_ms,
    )


def failed_row(rho: float, error: Exception, wall_ms: float) -> SweepRow:
    nan = float("nan")
    return SweepRow(
        rho=rho,
        sum_utility=nan,
        x_max=nan,
        r_regular=nan,
        r_complementary=nan,
        converged=False,
        iterations=0,
        wall_ms=wall_ms,
        error=str(error),
    )


class SweepResult(BaseModel):
    """Rows of a rho sweep in ascending rho, plus the selected rho* and the scenario seed."""

    utility: str
    rows: List[SweepRow]
    rho_star: Optional[float] = Field(
        None, description="Largest rho meeting the load cap, 1 when rho = 1 already does"
    )
    seed: Optional[int] = Field(None, description="Seed of the swept scenario")

    def csv_rows(self) -> List[list]:
        rows = [
            [
                row.rho,
                row.sum_utility,
                row.x_max,
                row.r_regular,
                row.r_complementary,
                row.converged,
                row.iterations,
                round(row.wall_ms, 3),
            ]
            for row in self.rows
        ]
        star = self.rho_star if self.rho_star is not None else float("nan")
        rows.append(["rho_star", star] + [None] * (len(SWEEP_COLUMNS) - 2))
        rows.append(["seed", self.seed] + [None] * (len(SWEEP_COLUMNS) - 2))
        return rows


class Planner(BaseModel):
    """
    Orchestrates solves, rho searches and sweeps over one scenario.

    Each solve is sequential and deterministic. Sweeps fan the rho values out
    over worker threads, at most ``settings.workers`` at a time, and collect
    the rows in ascending rho so the result matches a sequential run.

    Example:
        ```python
        planner = Planner.from_file("s.json", settings=Settings(workers=4))
        result = planner.sweep_sync("log", rho_grid(0.01))
        ```

    Attributes:
        settings (Settings): Logging, concurrency and solver settings
        scenario (Scenario): Topology, caps and weights being planned for
    """

    settings: Settings = Field(default_factory=Settings)
    scenario: Scenario

    model_config = ConfigDict(arbitrary_types_allowed=True)

    def __init__(self, **data):
        super().__init__(**data)
        setup_logging(self.settings.log_path, self.settings.debug)

    @classmethod
    def from_file(cls, path: Union[str, Path], settings: Optional[Settings] = None) -> "Planner":
        return cls(settings=settings or Settings(), scenario=load_scenario(path))

    def problem(
        self,
        utility: str = "log",
        rho: float = 1.0,
        load_epsilon: Optional[float] = None,
        **kwargs,
    ) -> ProblemSpec:
        get_utility(utility)
        solver = self.settings.solver
        if load_epsilon is not None:
            solver = solver.model_copy(update={"load_epsilon": load_epsilon})
        return ProblemSpec.from_scenario(self.scenario, utility=utility, rho=rho, solver=solver, **kwargs)

    def solve(self, utility: str = "log", rho: float = 1.0, **kwargs) -> SolveReport:
        return solve_q(self.problem(utility, rho, **kwargs))

    def search(
        self,
        utility: str = "log",
        step: Optional[float] = None,
        load_epsilon: Optional[float] = None,
    ) -> Tuple[float, SolveReport]:
        """Sequential rho search; see ``optimizer.rho_search``."""
        return rho_search(self.problem(utility, load_epsilon=load_epsilon), step)

    def _timed_solve(self, spec: ProblemSpec) -> Tuple[SweepRow, Optional[SolveReport]]:
        started = time.perf_counter()
        try:
            report = solve_q(spec)
        except LoadCoupleError as e:
            wall_ms = (time.perf_counter() - started) * 1000
            logger.error("Sweep row rho=%.6g failed: %s", spec.rho, e, exc_info=True)
            return failed_row(spec.rho, e, wall_ms), None
        wall_ms = (time.perf_counter() - started) * 1000
        return sweep_row(spec.rho, report, wall_ms), report

    async def _evaluate(
        self, spec: ProblemSpec, grid: Sequence[float]
    ) -> Dict[float, Tuple[SweepRow, Optional[SolveReport]]]:
        semaphore = asyncio.Semaphore(self.settings.workers)

        async def run(rho: float):
            async with semaphore:
                return rho, await asyncio.to_thread(self._timed_solve, spec.with_rho(rho))

        results = await asyncio.gather(*(run(rho) for rho in grid))
        return dict(results)

    async def sweep(
        self,
        utility: str = "log",
        grid: Optional[Sequence[float]] = None,
        load_epsilon: Optional[float] = None,
    ) -> SweepResult:
        """
        Solve Q(rho) for every grid value and pick rho* by the load-cap rule.

        Rows that fail keep their rho with ``converged = False`` and NaN values.
        rho* is 1 when the solve at rho = 1 meets the cap, otherwise the largest
        qualifying grid value, or None when no value qualifies.
        """
        spec = self.problem(utility, load_epsilon=load_epsilon)
        values = sorted(set(grid if grid is not None else rho_grid(spec.solver.rho_step)))
        logger.info(
            "Sweeping %s over %d rho values with %d worker(s)",
            spec.utility,
            len(values),
            self.settings.workers,
        )
        started = time.perf_counter()

        evaluated = await self._evaluate(spec, sorted(set(values) | {1.0}))
        reports = {rho: report for rho, (_, report) in evaluated.items()}
        full_load = reports[1.0]
        if full_load is not None and load_cap_met(full_load, spec.solver):
            rho_star: Optional[float] = 1.0
        else:
            rho_star = select_rho({rho: reports[rho] for rho in values}, spec.solver)

        rows = [evaluated[rho][0] for rho in values]
        failures = sum(1 for row in rows if row.error is not None)
        logger.info(
            "Sweep finished in %s: rho*=%s, %d failed row(s)",
            format_seconds(time.perf_counter() - started),
            rho_star,
            failures,
        )
        return SweepResult(utility=spec.utility, rows=rows, rho_star=rho_star, seed=spec.seed)

    def sweep_sync(self, *args, **kwargs) -> SweepResult:
        """Synchronous version of sweep()."""
        return asyncio.run(self.sweep(*args, **kwargs))

    async def search_concurrent(
        self,
        utility: str = "log",
        step: Optional[float] = None,
        load_epsilon: Optional[float] = None,
    ) -> Tuple[float, SolveReport]:
        """
        Concurrent rho search giving the same answer as the sequential one.

        rho = 1 is solved first; when it misses the cap every grid value is
        evaluated and the largest qualifying one is selected.

        Raises:
            LoadCapError: If no grid point meets the cap
        """
        spec = self.problem(utility, load_epsilon=load_epsilon)
        step = step or spec.solver.rho_step
        report = await asyncio.to_thread(solve_q, spec)
        if load_cap_met(report, spec.solver):
            return 1.0, report
        evaluated = await self._evaluate(spec, rho_grid(step))
        reports = {rho: result for rho, (_, result) in evaluated.items()}
        rho = select_rho(reports, spec.solver)
        if rho is None:
            raise LoadCapError(f"No rho on the grid with step {step} keeps the maximum load within the cap")
        return rho, reports[rho]


def write_sweep(result: SweepResult, path: Union[str, Path]) -> None:
    write_csv(SWEEP_COLUMNS, result.csv_rows(), path)
    logger.info("Wrote %d sweep rows to %s", len(result.rows), path)


def run_sweep(
    scenario_path: Union[str, Path],
    utility: str,
    grid: Sequence[float],
    output_path: Union[str, Path],
    settings: Optional[Settings] = None,
    load_epsilon: Optional[float] = None,
) -> SweepResult:
    """
    Sweep a scenario file over a rho grid and write the CSV.

    The CSV has one row per rho in ascending order with columns
    rho, U_sum, x_max, r_regular, r_complementary, converged, iterations,
    wall_ms, followed by ``rho_star`` and ``seed`` summary rows.
    """
    if not grid:
        raise ValueError("Sweep grid is empty")
    if any(not 0 < rho <= 1 for rho in grid):
        raise ValueError("Sweep grid values must lie in (0, 1]")
    planner = Planner.from_file(scenario_path, settings=settings)
    result = planner.sweep_sync(utility, grid, load_epsilon=load_epsilon)
    write_sweep(result, output_path)
    return result
