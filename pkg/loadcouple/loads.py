import logging
from dataclasses import dataclass
from typing import Iterator, List, NamedTuple, Optional

import numpy as np

from .exceptions import ConvergenceError, DemandValidationError, DivergenceError, NonPositiveDemandError
from .schemas import (
    DemandAllocation,
    IterationSchedule,
    LoadVector,
    Mode,
    NetworkName,
    ScheduleKind,
    SolverSettings,
    Topology,
)
from .spectral import network_coupling
from .topology import CellNetwork, get_network, networks_of

logger = logging.getLogger(__name__)


class LoadSolution(NamedTuple):
    load: LoadVector
    iterations: int
    converged: bool


@dataclass(frozen=True)
class LinearCounterpart:
    """Linear system x = Hx + c whose nonnegative solvability matches the NLCE's."""

    network: NetworkName
    H: np.ndarray
    c: np.ndarray

    def solve(self) -> np.ndarray:
        """Solve (I - H)x = c; meaningful only when r(H) < 1."""
        size = self.c.shape[0]
        return np.linalg.solve(np.eye(size) - self.H, self.c)


def _check_load(values: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise DemandValidationError("Load entries must be finite")
    if np.any(values < 0):
        raise DemandValidationError("Load entries must be nonnegative")
    return values


def _check_demands(topology: Topology, demands: DemandAllocation) -> None:
    if len(demands.regular) != topology.n or len(demands.complementary) != topology.n_complementary:
        raise DemandValidationError(
            f"Demand allocation has shape ({len(demands.regular)}, "
            f"{len(demands.complementary)}), topology expects "
            f"({topology.n}, {topology.n_complementary})"
        )


def _network_slice(network: CellNetwork, values: np.ndarray) -> np.ndarray:
    return values[network.offset : network.offset + network.n_cells]


def link_sinr(network: CellNetwork, x: np.ndarray, links: Optional[np.ndarray] = None) -> np.ndarray:
    """SINR of every served link of a network at load ``x``."""
    if links is None:
        links = np.arange(network.n_links)
    serving = network.serving[links]
    gains = network.gains[:, links]
    received = network.powers[serving] * gains[serving, np.arange(links.shape[0])]
    interference = (network.powers * x) @ gains - received * x[serving]
    # Roundoff can leave a tiny negative remainder when only the server is loaded.
    interference = np.maximum(interference, 0.0)
    return received / (interference + network.noise)


def network_load_map(network: CellNetwork, cell_demands: np.ndarray, x: np.ndarray) -> np.ndarray:
    """f(x) for a single network given its per-cell demands."""
    rates = np.log1p(link_sinr(network, x))
    per_link = network.link_demands(cell_demands) / rates
    return np.bincount(network.serving, weights=per_link, minlength=network.n_cells)


def _cell_load(network: CellNetwork, cell_demands: np.ndarray, x: np.ndarray, cell: int) -> float:
    links = network.members[cell]
    if links.shape[0] == 0:
        return 0.0
    rates = np.log1p(link_sinr(network, x, links))
    return float(np.sum(cell_demands[cell] / rates))


def sinr(topology: Topology, load: LoadVector, user: int, cell: int) -> float:
    """
    SINR of ``user`` when served by ``cell``.

    Args:
        topology: Topology holding gains and powers
        load: Current load of every cell
        user: User index
        cell: Global cell index (regular cells first, then complementary cells)

    Returns:
        float: p_i g_ij / (sum of loaded interference + noise)
    """
    x = _check_load(load.as_array())
    n = topology.n
    target = topology.users[user]
    if cell != target.regular_cell and cell != n + target.complementary_cell:
        raise DemandValidationError(f"Cell {cell} does not serve user {user}")
    for network in networks_of(topology):
        local = cell - network.offset
        if not 0 <= local < network.n_cells:
            continue
        links = np.flatnonzero((network.users == user) & (network.serving == local))
        if links.shape[0] == 0:
            continue
        return float(link_sinr(network, _network_slice(network, x), links)[0])
    raise DemandValidationError(f"Cell {cell} does not serve user {user}")


def eval_load_map(topology: Topology, demands: DemandAllocation, load: LoadVector) -> LoadVector:
    """Evaluate f(x) for every network of the topology."""
    _check_demands(topology, demands)
    x = _check_load(load.as_array())
    result = np.empty_like(x)
    for network in networks_of(topology):
        part = network_load_map(network, network.cell_demands(demands), _network_slice(network, x))
        result[network.offset : network.offset + network.n_cells] = part
    return LoadVector.from_array(topology, result)


def _local_order(network: CellNetwork, schedule: IterationSchedule, n_total: int) -> List[int]:
    if schedule.order is None:
        return list(range(network.n_cells))
    order = list(schedule.order)
    if sorted(order) != list(range(n_total)):
        raise DemandValidationError(
            f"Asynchronous order must be a permutation of all {n_total} cells"
        )
    return [c - network.offset for c in order if network.offset <= c < network.offset + network.n_cells]


def iterate_network(
    network: CellNetwork,
    cell_demands: np.ndarray,
    initial: np.ndarray,
    schedule: IterationSchedule,
    n_total: int,
) -> Iterator[np.ndarray]:
    """Yield the load after every synchronous step or asynchronous round."""
    x = np.array(initial, dtype=float)
    if schedule.kind is ScheduleKind.SYNCHRONOUS:
        while True:
            x = network_load_map(network, cell_demands, x)
            yield x.copy()
    order = _local_order(network, schedule, n_total)
    while True:
        for cell in order:
            for _ in range(schedule.inner_repeats):
                x[cell] = _cell_load(network, cell_demands, x, cell)
        yield x.copy()


def _solve_network(
    network: CellNetwork,
    cell_demands: np.ndarray,
    initial: np.ndarray,
    schedule: IterationSchedule,
    n_total: int,
    settings: SolverSettings,
):
    x = initial
    prev_residual = np.inf
    increases = 0
    residual = np.inf
    steps = iterate_network(network, cell_demands, initial, schedule, n_total)
    for iteration in range(1, settings.load_max_iterations + 1):
        fx = next(steps)
        residual = float(np.max(np.abs(fx - x))) if fx.size else 0.0
        x = fx
        if residual <= settings.load_tolerance * max(1.0, float(np.max(x, initial=0.0))):
            return x, iteration, True, residual, None
        if not np.all(np.isfinite(x)) or np.max(x) > settings.divergence_load:
            return x, iteration, False, residual, f"load exceeded {settings.divergence_load:g}"
        increases = increases + 1 if residual > prev_residual else 0
        if increases >= settings.divergence_window:
            return x, iteration, False, residual, f"residual grew for {increases} consecutive iterations"
        prev_residual = residual
    reason = "iteration cap reached while residual grows" if increases > 0 else None
    return x, settings.load_max_iterations, False, residual, reason


def fixed_point_load(
    topology: Topology,
    demands: DemandAllocation,
    schedule: Optional[IterationSchedule] = None,
    initial: Optional[LoadVector] = None,
    settings: Optional[SolverSettings] = None,
    raise_on_divergence: bool = True,
) -> LoadSolution:
    """
    Solve the load coupling equation x = f(x) by fixed-point iteration.

    WiFi mode solves the regular and complementary networks independently;
    SmallCell mode solves one merged system. The reported iteration count is
    the largest over the networks.

    Args:
        topology: Topology to solve on
        demands: Per-cell demands
        schedule: Synchronous (default) or asynchronous schedule
        initial: Starting load, all zeros by default
        settings: Tolerances, caps and divergence guard
        raise_on_divergence: Raise DivergenceError instead of returning
            ``converged=False`` when the guard fires

    Returns:
        LoadSolution: Load, iterations and convergence flag
    """
    settings = settings or SolverSettings()
    schedule = schedule or IterationSchedule.synchronous()
    _check_demands(topology, demands)
    x0 = np.zeros(topology.n_transmitters) if initial is None else _check_load(initial.as_array())

    result = np.empty(topology.n_transmitters)
    iterations, converged = 0, True
    for network in networks_of(topology):
        x, its, ok, residual, reason = _solve_network(
            network,
            network.cell_demands(demands),
            _network_slice(network, x0),
            schedule,
            topology.n_transmitters,
            settings,
        )
        result[network.offset : network.offset + network.n_cells] = x
        iterations = max(iterations, its)
        if not ok:
            converged = False
            if reason is not None:
                logger.debug(
                    "Load iteration on %s network stopped: %s", network.name.value, reason
                )
                if raise_on_divergence:
                    raise DivergenceError(its, residual, reason)
            else:
                logger.warning(
                    "Load iteration on %s network hit the cap of %d iterations (residual=%.3e)",
                    network.name.value,
                    its,
                    residual,
                )
    if converged and not np.all(np.isfinite(result)):
        raise ConvergenceError("Load iteration produced non-finite loads")
    return LoadSolution(LoadVector.from_array(topology, result), iterations, converged)


def load_trajectory(
    topology: Topology,
    demands: DemandAllocation,
    schedule: IterationSchedule,
    initial: LoadVector,
    rounds: int,
) -> Iterator[LoadVector]:
    """Yield the combined load after each of ``rounds`` steps."""
    _check_demands(topology, demands)
    x0 = _check_load(initial.as_array())
    iterators = [
        (
            network,
            iterate_network(
                network,
                network.cell_demands(demands),
                _network_slice(network, x0),
                schedule,
                topology.n_transmitters,
            ),
        )
        for network in networks_of(topology)
    ]
    current = x0.copy()
    for _ in range(rounds):
        for network, steps in iterators:
            current[network.offset : network.offset + network.n_cells] = next(steps)
        yield LoadVector.from_array(topology, current)


def linear_counterpart(
    topology: Topology, demands: DemandAllocation, network: Optional[str] = None
) -> LinearCounterpart:
    """
    Build H and c = f(0) for one network.

    ``h_ik = (p_k / p_i) * sum_j g_kj d_ij / g_ij``, so H = diag(p)^-1 Λ(d) diag(p).
    ``network`` defaults to the regular network (merged in SmallCell mode).
    """
    _check_demands(topology, demands)
    if network is None:
        network = NetworkName.REGULAR if topology.mode is Mode.WIFI else NetworkName.MERGED
    cells = get_network(topology, network)
    d = cells.cell_demands(demands)
    if np.any(d <= 0):
        zero = np.flatnonzero(d <= 0).tolist()
        raise NonPositiveDemandError(
            f"Linear counterpart requires positive demand in every cell, zero in {zero}"
        )
    Lambda = network_coupling(cells, d)
    p = cells.powers
    H = Lambda * (p[np.newaxis, :] / p[:, np.newaxis])
    c = network_load_map(cells, d, np.zeros(cells.n_cells))
    return LinearCounterpart(network=cells.name, H=H, c=c)


def solve_linear_counterpart(topology: Topology, demands: DemandAllocation, network: Optional[str] = None) -> np.ndarray:
    return linear_counterpart(topology, demands, network).solve()
