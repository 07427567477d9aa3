import logging
from enum import Enum
from typing import Iterator, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from .exceptions import GridTooLargeError, ValidationError
from .schemas import DemandAllocation, Mode, ProblemSpec, UtilityKind
from .spectral import batched_spectral_radius
from .topology import CellNetwork, get_network, networks_of, require_valid
from .utility import get_utility

logger = logging.getLogger(__name__)

MAX_GRID_POINTS = 100_000_000
_CHUNK = 20_000
_CAP_TOLERANCE = 1e-12


class OracleResult(BaseModel):
    demands: Optional[DemandAllocation] = None
    objective: float = Field(description="Best feasible objective, -inf when none")
    resolution: int
    evaluated_points: int = Field(description="Grid points evaluated explicitly")
    grid_points: int = Field(description="Size of the full product grid covered")


class ProbeRegion(str, Enum):
    FEASIBLE = "feasible"
    COMPLEMENT = "complement"


class ProbeReport(BaseModel):
    utility: str
    network: str
    region: ProbeRegion
    seed: int
    trials: int
    violations: int
    worst_excess: float = Field(
        0.0, description="Largest relative distance of a violating midpoint from the boundary"
    )


def _cell_maxima(spec: ProblemSpec) -> np.ndarray:
    topology = spec.topology
    caps = spec.caps.as_array()
    n = topology.n
    maxima = np.zeros(topology.n_transmitters)
    np.maximum.at(maxima, topology.regular_index, caps)
    np.maximum.at(maxima, n + topology.complementary_index, caps)
    if spec.regular_limits is not None:
        maxima[:n] = np.minimum(maxima[:n], spec.regular_limits)
    if spec.complementary_limits is not None:
        maxima[n:] = np.minimum(maxima[n:], spec.complementary_limits)
    return maxima


def _pairs(spec: ProblemSpec) -> Tuple[np.ndarray, np.ndarray]:
    topology = spec.topology
    caps = spec.caps.as_array()
    pairs = {}
    for user, cap in zip(topology.users, caps):
        if cap <= 0:
            continue
        key = (user.regular_cell, topology.n + user.complementary_cell)
        pairs[key] = min(cap, pairs.get(key, np.inf))
    cells = np.array(sorted(pairs), dtype=int).reshape(-1, 2)
    return cells, np.array([pairs[tuple(c)] for c in cells], dtype=float)


def _chunks(axes: List[np.ndarray]) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield (flat indices, points) over the product of ``axes`` in chunks."""
    shape = tuple(axis.shape[0] for axis in axes)
    total = int(np.prod(shape))
    for start in range(0, total, _CHUNK):
        flat = np.arange(start, min(start + _CHUNK, total))
        idx = np.unravel_index(flat, shape)
        points = np.column_stack([axis[i] for axis, i in zip(axes, idx)])
        yield flat, points


def _feasible_radius(network: CellNetwork, points: np.ndarray, bound: float) -> np.ndarray:
    if network.n_cells < 2:
        return np.ones(points.shape[0], dtype=bool)
    stack = points[:, :, np.newaxis] * network.template[np.newaxis, :, :]
    return batched_spectral_radius(stack) <= bound


def brute_force_oracle(spec: ProblemSpec, resolution: int = 200) -> OracleResult:
    """
    Best objective over the demand grid d_c = Dmax_c * (1..resolution) / resolution.

    In WiFi mode the two networks are searched separately: a prefix-maximum
    table over the complementary grid answers, for every regular grid point,
    the best complementary point under the caps it leaves. This is exact over
    the full product grid.

    Raises:
        GridTooLargeError: If the explicitly evaluated grid exceeds 1e8 points
    """
    require_valid(spec.topology, spec.caps)
    if resolution < 1:
        raise ValidationError("Grid resolution must be at least 1")
    topology = spec.topology
    utility = get_utility(spec.utility)
    k, k_comp = spec.weights.aggregate(topology)
    weights = np.concatenate([k, k_comp])
    maxima = _cell_maxima(spec)
    if np.any(maxima <= 0):
        raise ValidationError("Every cell needs a positive cap for the oracle grid")
    steps = np.arange(1, resolution + 1) / resolution
    axes = [m * steps for m in maxima]
    utilities = [weights[c] * np.asarray(utility(axes[c])) for c in range(len(axes))]
    bound = spec.rho - spec.solver.radius_margin
    pair_cells, pair_caps = _pairs(spec)
    n = topology.n

    if topology.mode is Mode.WIFI:
        evaluated = resolution**n + resolution**topology.n_complementary
    else:
        evaluated = resolution**topology.n_transmitters
    if evaluated > MAX_GRID_POINTS:
        raise GridTooLargeError(
            f"Oracle grid needs {evaluated:.3g} evaluations, limit is {MAX_GRID_POINTS:.0e}"
        )
    total = resolution**topology.n_transmitters

    def objective(points: np.ndarray, cells: range) -> np.ndarray:
        idx = np.rint(points / maxima[list(cells)] * resolution).astype(int) - 1
        return sum(utilities[c][idx[:, col]] for col, c in enumerate(cells))

    if topology.mode is Mode.WIFI:
        best = _separable_search(spec, axes, objective, bound, pair_cells, pair_caps)
    else:
        best = _product_search(spec, axes, objective, bound, pair_cells, pair_caps)

    if best is None:
        logger.info("Oracle found no feasible grid point at resolution %d", resolution)
        return OracleResult(
            objective=float("-inf"), resolution=resolution, evaluated_points=evaluated, grid_points=total
        )
    value, point = best
    return OracleResult(
        demands=DemandAllocation.from_arrays(point[:n], point[n:]),
        objective=float(value),
        resolution=resolution,
        evaluated_points=evaluated,
        grid_points=total,
    )


def _separable_search(spec, axes, objective, bound, pair_cells, pair_caps):
    topology = spec.topology
    n, n_comp = topology.n, topology.n_complementary
    regular_net = get_network(topology, "regular")
    comp_net = get_network(topology, "complementary")
    comp_axes = axes[n:]
    shape = tuple(axis.shape[0] for axis in comp_axes)
    check = spec.spectral_constraints

    table = np.full(int(np.prod(shape)), -np.inf)
    for flat, points in _chunks(comp_axes):
        values = objective(points, range(n, n + n_comp))
        if check:
            values = np.where(_feasible_radius(comp_net, points, bound), values, -np.inf)
        table[flat] = values
    raw = table.reshape(shape)
    prefix = raw
    for axis in range(n_comp):
        prefix = np.maximum.accumulate(prefix, axis=axis)

    best_value, best_regular, best_bounds = -np.inf, None, None
    for _, points in _chunks(axes[:n]):
        values = objective(points, range(n))
        if check:
            values = np.where(_feasible_radius(regular_net, points, bound), values, -np.inf)
        limits = np.full((points.shape[0], n_comp), np.inf)
        for (i, a), cap in zip(pair_cells, pair_caps):
            limits[:, a - n] = np.minimum(limits[:, a - n], cap - points[:, i])
        index = np.column_stack(
            [
                np.searchsorted(comp_axes[a], limits[:, a] + _CAP_TOLERANCE, side="right") - 1
                for a in range(n_comp)
            ]
        )
        index = np.minimum(index, np.array(shape) - 1)
        valid = np.all(index >= 0, axis=1) & np.isfinite(values)
        if not valid.any():
            continue
        totals = np.full(points.shape[0], -np.inf)
        rows = np.flatnonzero(valid)
        totals[rows] = values[rows] + prefix[tuple(index[rows].T)]
        top = int(np.argmax(totals))
        if totals[top] > best_value:
            best_value, best_regular, best_bounds = totals[top], points[top], index[top]

    if best_regular is None or not np.isfinite(best_value):
        return None
    region = raw[tuple(slice(0, m + 1) for m in best_bounds)]
    comp_index = np.unravel_index(int(np.argmax(region)), region.shape)
    comp_point = np.array([comp_axes[a][comp_index[a]] for a in range(n_comp)])
    return best_value, np.concatenate([best_regular, comp_point])


def _product_search(spec, axes, objective, bound, pair_cells, pair_caps):
    topology = spec.topology
    merged = networks_of(topology)[0]
    best_value, best_point = -np.inf, None
    for _, points in _chunks(axes):
        values = objective(points, range(topology.n_transmitters))
        served = points[:, pair_cells[:, 0]] + points[:, pair_cells[:, 1]]
        ok = np.all(served <= pair_caps + _CAP_TOLERANCE, axis=1)
        if spec.spectral_constraints:
            candidates = np.flatnonzero(ok)
            if candidates.size:
                ok[candidates] = _feasible_radius(merged, points[candidates], bound)
        values = np.where(ok, values, -np.inf)
        top = int(np.argmax(values))
        if values[top] > best_value:
            best_value, best_point = values[top], points[top]
    if best_point is None:
        return None
    return best_value, best_point


def convexity_probe(
    spec: ProblemSpec,
    trials: int = 10_000,
    region: Optional[ProbeRegion] = None,
    network: Optional[str] = None,
    seed: int = 0,
) -> ProbeReport:
    """
    Count midpoint violations of the transformed feasible set of one network.

    Points are drawn along random positive directions and scaled to s times
    the radius bound, with s in (0, 1] for the feasible set and s in (1, 3]
    for its complement. A violation is a midpoint in y-space that leaves the
    sampled region.

    Args:
        spec: Problem inputs (topology, utility, rho)
        trials: Number of sampled pairs
        region: Feasible set (default for LOG/DLOG) or complement (default for LIN)
        network: Network to probe, the first network with 2+ cells by default
        seed: Seed of the PCG64 generator

    Returns:
        ProbeReport: Violation count and worst excess
    """
    utility = get_utility(spec.utility)
    if region is None:
        region = ProbeRegion.COMPLEMENT if utility.name == UtilityKind.LIN.value else ProbeRegion.FEASIBLE
    region = ProbeRegion(region)
    candidates = [net for net in networks_of(spec.topology) if net.n_cells >= 2]
    if network is not None:
        try:
            candidates = [get_network(spec.topology, network)]
        except (KeyError, ValueError) as e:
            raise ValidationError(f"No network {network!r} in {spec.topology.mode.value} mode") from e
    if not candidates or candidates[0].n_cells < 2:
        raise ValidationError("Convexity probe needs a network with at least 2 cells")
    net = candidates[0]
    bound = spec.rho - spec.solver.radius_margin
    rng = np.random.Generator(np.random.PCG64(seed))

    def sample(count: int) -> np.ndarray:
        directions = 1.0 - rng.random((count, net.n_cells))
        radii = batched_spectral_radius(directions[:, :, np.newaxis] * net.template)
        if region is ProbeRegion.FEASIBLE:
            scale = 1.0 - rng.random(count)
        else:
            scale = 1.0 + 2.0 * (1.0 - rng.random(count))
        d = directions * (scale * bound / radii)[:, np.newaxis]
        return np.asarray(utility(d), dtype=float)

    violations, worst = 0, 0.0
    for start in range(0, trials, _CHUNK):
        count = min(_CHUNK, trials - start)
        first, second = sample(count), sample(count)
        middle = np.asarray(utility.invert(0.5 * (first + second)), dtype=float)
        r = batched_spectral_radius(middle[:, :, np.newaxis] * net.template)
        if region is ProbeRegion.FEASIBLE:
            excess = (r - bound) / bound
        else:
            excess = (bound - r) / bound
        bad = excess > 1e-12
        violations += int(bad.sum())
        if bad.any():
            worst = max(worst, float(excess[bad].max()))
    logger.info(
        "Convexity probe (%s, %s region): %d/%d violations", utility.name, region.value, violations, trials
    )
    return ProbeReport(
        utility=utility.name,
        network=net.name.value,
        region=region,
        seed=seed,
        trials=trials,
        violations=violations,
        worst_excess=worst,
    )
