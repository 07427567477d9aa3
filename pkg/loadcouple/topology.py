import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .exceptions import ScenarioValidationError
from .schemas import DemandAllocation, DemandCap, Mode, NetworkName, Topology, ValidationIssue

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CellNetwork:
    """
    One coupled network as seen by the load and spectral solvers.

    Columns of ``gains`` are served links: in WiFi mode every user appears once
    in each network, in SmallCell mode every user appears twice in the merged
    network (once per serving cell).
    """

    name: NetworkName
    powers: np.ndarray
    gains: np.ndarray
    serving: np.ndarray
    noise: float
    offset: int
    users: np.ndarray
    members: Tuple[np.ndarray, ...] = field(repr=False)
    template: np.ndarray = field(repr=False)

    @property
    def n_cells(self) -> int:
        return self.powers.shape[0]

    @property
    def n_links(self) -> int:
        return self.serving.shape[0]

    @property
    def serving_gains(self) -> np.ndarray:
        return self.gains[self.serving, np.arange(self.n_links)]

    def cell_demands(self, demands: DemandAllocation) -> np.ndarray:
        """Per-cell demand of this network taken from a full allocation."""
        if self.name is NetworkName.REGULAR:
            return np.asarray(demands.regular, dtype=float)
        if self.name is NetworkName.COMPLEMENTARY:
            return np.asarray(demands.complementary, dtype=float)
        return demands.as_array()

    def link_demands(self, cell_demands: np.ndarray) -> np.ndarray:
        return np.asarray(cell_demands, dtype=float)[self.serving]

    def global_cell(self, local: int) -> int:
        return self.offset + local


def coupling_template(gains: np.ndarray, serving: np.ndarray, n_cells: int) -> np.ndarray:
    """Demand-independent coupling template with entries sum_j g_kj / g_ij."""
    n_links = serving.shape[0]
    ratios = gains / gains[serving, np.arange(n_links)]
    template = np.zeros((n_cells, gains.shape[0]))
    np.add.at(template, serving, ratios.T)
    np.fill_diagonal(template, 0.0)
    return template


def _make_network(
    name: NetworkName,
    powers: np.ndarray,
    gains: np.ndarray,
    serving: np.ndarray,
    noise: float,
    offset: int,
    users: np.ndarray,
) -> CellNetwork:
    members = tuple(np.flatnonzero(serving == i) for i in range(powers.shape[0]))
    template = coupling_template(gains, serving, powers.shape[0])
    arrays = (powers, gains, serving, users, template, *members)
    for arr in arrays:
        arr.setflags(write=False)
    return CellNetwork(
        name=name,
        powers=powers,
        gains=gains,
        serving=serving,
        noise=float(noise),
        offset=offset,
        users=users,
        members=members,
        template=template,
    )


def networks_of(topology: Topology) -> Tuple[CellNetwork, ...]:
    """
    Split a topology into the networks whose loads are coupled.

    WiFi mode yields the regular and the complementary network, which never
    interfere with each other. SmallCell mode yields one merged network over
    all ``n + n'`` transmitters. The result is cached on the topology.
    """
    cached = topology._networks
    if cached is not None:
        return cached

    n = topology.n
    gains = topology.gain_matrix
    powers = topology.powers
    user_ids = np.arange(topology.n_users)
    if topology.mode is Mode.WIFI:
        networks = (
            _make_network(
                NetworkName.REGULAR,
                powers[:n].copy(),
                gains[:n].copy(),
                topology.regular_index.copy(),
                topology.noise,
                0,
                user_ids.copy(),
            ),
            _make_network(
                NetworkName.COMPLEMENTARY,
                powers[n:].copy(),
                gains[n:].copy(),
                topology.complementary_index.copy(),
                topology.noise,
                n,
                user_ids.copy(),
            ),
        )
    else:
        networks = (
            _make_network(
                NetworkName.MERGED,
                powers.copy(),
                np.hstack([gains, gains]),
                np.concatenate(
                    [topology.regular_index, n + topology.complementary_index]
                ),
                topology.noise,
                0,
                np.concatenate([user_ids, user_ids]),
            ),
        )
    topology._networks = networks
    return networks


def get_network(topology: Topology, name) -> CellNetwork:
    name = NetworkName(name)
    for network in networks_of(topology):
        if network.name is name:
            return network
    raise KeyError(f"Network {name.value} not present in {topology.mode.value} mode")


def _positive_finite(value: float) -> bool:
    return math.isfinite(value) and value > 0


def _duplicates(ids: List[str]) -> List[str]:
    return [key for key, count in Counter(ids).items() if count > 1]


def validate_topology(topology: Topology, caps: DemandCap) -> List[ValidationIssue]:
    """
    Collect every invariant violation of a topology and its demand caps.

    Args:
        topology: Topology to check
        caps: Per-user demand caps

    Returns:
        List[ValidationIssue]: Violations, empty when the inputs are valid
    """
    issues: List[ValidationIssue] = []

    def report(entity: str, field_name: str, message: str):
        issues.append(ValidationIssue(entity=entity, field=field_name, message=message))

    if topology.n == 0:
        report("topology", "regular_cells", "at least one regular cell is required")
    if topology.n_complementary == 0:
        report(
            "topology",
            "complementary_cells",
            "at least one complementary cell is required",
        )
    for cell_id in _duplicates(topology.regular_cells):
        report(f"regular_cell[{cell_id}]", "id", "duplicate cell identifier")
    for cell_id in _duplicates(topology.complementary_cells):
        report(f"complementary_cell[{cell_id}]", "id", "duplicate cell identifier")

    for i, power in enumerate(topology.regular_powers):
        if not _positive_finite(power):
            report(f"regular_cell[{i}]", "regular_powers", f"non-positive power {power!r}")
    for a, power in enumerate(topology.complementary_powers):
        if not _positive_finite(power):
            report(
                f"complementary_cell[{a}]",
                "complementary_powers",
                f"non-positive power {power!r}",
            )
    if not _positive_finite(topology.noise):
        report("topology", "noise", f"non-positive noise {topology.noise!r}")

    seen = set()
    for j, user in enumerate(topology.users):
        if not 0 <= user.regular_cell < topology.n:
            report(f"user[{j}]", "regular_cell", f"unknown regular cell {user.regular_cell}")
        if not 0 <= user.complementary_cell < topology.n_complementary:
            report(
                f"user[{j}]",
                "complementary_cell",
                f"unknown complementary cell {user.complementary_cell}",
            )
        key = (user.regular_cell, user.index)
        if key in seen:
            report(f"user[{j}]", "index", f"duplicate user identifier {key}")
        seen.add(key)

    served = Counter(u.regular_cell for u in topology.users)
    for i, cell_id in enumerate(topology.regular_cells):
        if served[i] == 0:
            report(f"regular_cell[{cell_id}]", "users", "empty cell")
    served = Counter(u.complementary_cell for u in topology.users)
    for a, cell_id in enumerate(topology.complementary_cells):
        if served[a] == 0:
            report(f"complementary_cell[{cell_id}]", "users", "empty cell")

    gains = topology.gain_matrix
    bad = ~(np.isfinite(gains) & (gains > 0))
    for t, j in zip(*np.nonzero(bad)):
        report(f"gain[{t}][{j}]", "gains", f"non-positive gain {gains[t, j]!r}")

    if len(caps.caps) != topology.n_users:
        report(
            "caps",
            "caps",
            f"expected {topology.n_users} caps, got {len(caps.caps)}",
        )
    for j, cap in enumerate(caps.caps):
        if not math.isfinite(cap) or cap < 0:
            report(f"user[{j}]", "caps", f"invalid demand cap {cap!r}")

    if issues:
        logger.debug("Topology validation found %d issue(s)", len(issues))
    return issues


def require_valid(topology: Topology, caps: DemandCap) -> None:
    issues = validate_topology(topology, caps)
    if issues:
        raise ScenarioValidationError("Invalid topology", issues)


def restrict_users(topology: Topology, keep: np.ndarray) -> Topology:
    """Copy of the topology holding only the users selected by the boolean mask ``keep``."""
    keep = np.asarray(keep, dtype=bool)
    if keep.all():
        return topology
    columns = np.flatnonzero(keep)
    return Topology.model_validate(
        {
            **topology.__dict__,
            "users": [topology.users[j] for j in columns],
            "gains": topology.gain_matrix[:, columns].tolist(),
        }
    )
