from typing import List, Optional, Sequence

import numpy as np
import pytest

from loadcouple.schemas import (
    DemandCap,
    Mode,
    ProblemSpec,
    Scenario,
    SolverSettings,
    Topology,
    User,
    UtilityWeights,
)


def make_topology(
    gains: Sequence[Sequence[float]],
    regular: Sequence[int],
    complementary: Sequence[int],
    regular_powers: Optional[List[float]] = None,
    complementary_powers: Optional[List[float]] = None,
    noise: float = 1.0,
    mode: Mode = Mode.WIFI,
) -> Topology:
    """Topology from a transmitter-major gain table and per-user cell indices."""
    gains = np.asarray(gains, dtype=float)
    n = max(regular) + 1
    n_comp = max(complementary) + 1
    users = []
    counts = {}
    for i, a in zip(regular, complementary):
        users.append(User(regular_cell=i, complementary_cell=a, index=counts.get(i, 0)))
        counts[i] = counts.get(i, 0) + 1
    return Topology(
        mode=mode,
        regular_cells=[f"bs{i}" for i in range(n)],
        complementary_cells=[f"ap{a}" for a in range(n_comp)],
        users=users,
        regular_powers=regular_powers or [1.0] * n,
        complementary_powers=complementary_powers or [1.0] * n_comp,
        noise=noise,
        gains=gains.tolist(),
    )


def random_topology(
    rng: np.random.Generator,
    n: int,
    n_comp: int,
    users_per_cell: int = 2,
    mode: Mode = Mode.WIFI,
) -> Topology:
    """Random positive gains with every user closest to its serving cells."""
    count = users_per_cell * max(n, n_comp)
    regular = [j % n for j in range(count)]
    complementary = [j % n_comp for j in range(count)]
    gains = rng.uniform(0.05, 1.0, size=(n + n_comp, count))
    for j in range(count):
        gains[regular[j], j] += 2.0
        gains[n + complementary[j], j] += 2.0
    return make_topology(
        gains,
        regular,
        complementary,
        regular_powers=list(rng.uniform(0.5, 2.0, n)),
        complementary_powers=list(rng.uniform(0.5, 2.0, n_comp)),
        noise=float(rng.uniform(0.05, 0.5)),
        mode=mode,
    )


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))


@pytest.fixture
def two_cell_topology():
    """Two regular cells with one user each and a shared access point."""
    return make_topology(
        [[1.0, 0.25], [0.5, 1.0], [1.0, 1.0]],
        regular=[0, 1],
        complementary=[0, 0],
        noise=0.1,
    )


@pytest.fixture
def single_pair_topology():
    """One regular cell, one access point, one user."""
    return make_topology([[1.0], [1.0]], regular=[0], complementary=[0])


@pytest.fixture
def paired_topology():
    """
    2 regular + 2 complementary cells, one user per pair of cells.

    Regular radius is 0.5*sqrt(d1*d2), complementary radius 0.2*sqrt(d'1*d'2).
    """
    return make_topology(
        [
            [1.0, 0.5],
            [0.5, 1.0],
            [1.0, 0.2],
            [0.2, 1.0],
        ],
        regular=[0, 1],
        complementary=[0, 1],
        regular_powers=[1.0, 1.0],
        complementary_powers=[10.0, 10.0],
        noise=1.0,
    )


@pytest.fixture
def paired_spec(paired_topology):
    return ProblemSpec(
        topology=paired_topology,
        caps=DemandCap(caps=[3.0, 3.0]),
        weights=UtilityWeights.uniform(paired_topology, 1.0, 1.0),
        utility="log",
        solver=SolverSettings(load_max_iterations=20_000),
    )


@pytest.fixture
def paired_scenario(paired_spec):
    return Scenario(
        topology=paired_spec.topology,
        caps=paired_spec.caps,
        weights=paired_spec.weights,
        seed=11,
    )
