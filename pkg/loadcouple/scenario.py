import logging
import math
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import pydantic

from .exceptions import DemandValidationError, ScenarioFormatError, ScenarioValidationError, SchemaVersionError
from .schemas import (
    SCHEMA_VERSION,
    DemandAllocation,
    DemandCap,
    GridScenarioParams,
    Scenario,
    Topology,
    User,
    UtilityWeights,
    ValidationIssue,
)
from .serialization import pydantic_error_field, read_json, write_json
from .topology import validate_topology

logger = logging.getLogger(__name__)


def path_gain(distance, kappa: float):
    """Path-loss gain z^-kappa."""
    return np.power(distance, -kappa)


def _open_uniform(rng: np.random.Generator, low: float, high: float, size: int) -> np.ndarray:
    # Sample from the open interval so no user sits on a cell boundary.
    return rng.uniform(np.nextafter(low, high), high, size)


def grid_scenario(params: GridScenarioParams) -> Tuple[Topology, DemandCap, UtilityWeights]:
    """
    Macro grid with base stations at macro-cell centres and access points at
    the centres of the square sub-cells, users drawn uniformly inside their
    access point's cell.

    Macro cell (row, col) covers [col*L, (col+1)*L] x [row*L, (row+1)*L]. Users
    are ordered by macro cell, then access point, then draw. The generator is
    PCG64 seeded with ``params.seed``.
    """
    if not params.side > 0:
        raise ScenarioValidationError("Degenerate geometry: side length must be positive")
    rng = np.random.Generator(np.random.PCG64(params.seed))
    side = params.side
    per_side = math.isqrt(params.per_macro)
    sub = side / per_side

    bs_positions: List[Tuple[float, float]] = []
    ap_positions: List[Tuple[float, float]] = []
    users: List[User] = []
    for row in range(params.rows):
        for col in range(params.cols):
            macro = row * params.cols + col
            bs_positions.append(((col + 0.5) * side, (row + 0.5) * side))
            for sub_row in range(per_side):
                for sub_col in range(per_side):
                    ap = len(ap_positions)
                    x0 = col * side + sub_col * sub
                    y0 = row * side + sub_row * sub
                    ap_positions.append((x0 + 0.5 * sub, y0 + 0.5 * sub))
                    xs = _open_uniform(rng, x0, x0 + sub, params.users_per_cell)
                    ys = _open_uniform(rng, y0, y0 + sub, params.users_per_cell)
                    local = (sub_row * per_side + sub_col) * params.users_per_cell
                    for t, (x, y) in enumerate(zip(xs, ys)):
                        users.append(
                            User(
                                regular_cell=macro,
                                complementary_cell=ap,
                                index=local + t,
                                position=(float(x), float(y)),
                            )
                        )

    transmitters = np.array(bs_positions + ap_positions)
    positions = np.array([u.position for u in users])
    distance = np.linalg.norm(transmitters[:, np.newaxis, :] - positions[np.newaxis, :, :], axis=2)
    gains = path_gain(distance, params.kappa)

    topology = Topology(
        mode=params.mode,
        regular_cells=[f"bs{i}" for i in range(len(bs_positions))],
        complementary_cells=[f"ap{a}" for a in range(len(ap_positions))],
        users=users,
        regular_powers=[params.macro_power] * len(bs_positions),
        complementary_powers=[params.complementary_power] * len(ap_positions),
        noise=params.noise,
        gains=gains.tolist(),
        regular_positions=bs_positions,
        complementary_positions=ap_positions,
    )
    caps = DemandCap.uniform(topology, params.cap)
    weights = UtilityWeights.uniform(topology, params.weight, params.complementary_weight)
    logger.debug(
        "Generated %dx%d grid: %d regular cells, %d complementary cells, %d users",
        params.rows,
        params.cols,
        topology.n,
        topology.n_complementary,
        topology.n_users,
    )
    return topology, caps, weights


def build_scenario(params: GridScenarioParams) -> Scenario:
    topology, caps, weights = grid_scenario(params)
    return Scenario(seed=params.seed, params=params, topology=topology, caps=caps, weights=weights)


def scenario_issues(scenario: Scenario) -> List[ValidationIssue]:
    issues = validate_topology(scenario.topology, scenario.caps)
    expected = scenario.topology.n_users
    for side, values in (
        ("regular", scenario.weights.regular),
        ("complementary", scenario.weights.complementary),
    ):
        if len(values) != expected:
            issues.append(
                ValidationIssue(
                    entity="weights",
                    field=side,
                    message=f"expected {expected} weights, got {len(values)}",
                )
            )
        for j, w in enumerate(values):
            if not math.isfinite(w) or w < 0:
                issues.append(
                    ValidationIssue(entity=f"user[{j}]", field=f"weights.{side}", message=f"invalid weight {w!r}")
                )
    return issues


def save_scenario(scenario: Scenario, path: Union[str, Path]) -> None:
    """Write a scenario as schema-versioned JSON."""
    write_json(scenario.model_dump(mode="json"), path)
    logger.info("Saved scenario with %d users to %s", scenario.topology.n_users, path)


def load_scenario(path: Union[str, Path]) -> Scenario:
    """
    Read and validate a scenario file.

    Raises:
        ScenarioFormatError: If the file is unreadable or malformed
        SchemaVersionError: If ``schema_version`` is missing or unsupported
        ScenarioValidationError: If the topology violates an invariant
    """
    raw = read_json(path)
    if not isinstance(raw, dict):
        raise ScenarioFormatError(f"Scenario {path} must be a JSON object")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(version, SCHEMA_VERSION)
    try:
        scenario = Scenario.model_validate(raw)
    except pydantic.ValidationError as e:
        first = e.errors()[0]
        raise ScenarioFormatError(f"Invalid scenario {path}: {first['msg']}", field=pydantic_error_field(first))
    issues = scenario_issues(scenario)
    if issues:
        raise ScenarioValidationError(f"Scenario {path} failed validation", issues)
    return scenario


def load_demands(path: Union[str, Path]) -> DemandAllocation:
    """Read ``{"regular": [...], "complementary": [...]}`` as a demand allocation."""
    raw = read_json(path)
    try:
        return DemandAllocation.model_validate(raw)
    except pydantic.ValidationError as e:
        first = e.errors()[0]
        field = pydantic_error_field(first)
        if first.get("type") == "value_error":
            raise DemandValidationError(f"Invalid demands in {path}: {field}: {first['msg']}")
        raise ScenarioFormatError(f"Invalid demand file {path}: {first['msg']}", field=field)


def save_demands(demands: DemandAllocation, path: Union[str, Path]) -> None:
    write_json(demands.model_dump(mode="json"), path)
