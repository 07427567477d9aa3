import math
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, field_validator, model_validator

SCHEMA_VERSION = 1


class Mode(str, Enum):
    WIFI = "wifi"
    SMALL_CELL = "smallcell"


class UtilityKind(str, Enum):
    LIN = "lin"
    LOG = "log"
    DLOG = "dlog"


class ScheduleKind(str, Enum):
    SYNCHRONOUS = "sync"
    ASYNCHRONOUS = "async"


class NetworkName(str, Enum):
    REGULAR = "regular"
    COMPLEMENTARY = "complementary"
    MERGED = "merged"


class ValidationIssue(BaseModel):
    model_config = ConfigDict(frozen=True)

    entity: str
    field: str
    message: str

    def __str__(self):
        return f"{self.entity}.{self.field}: {self.message}"


class SolverSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    load_tolerance: float = Field(
        1e-12, gt=0, description="Sup-norm residual at which the load iteration stops"
    )
    load_max_iterations: int = Field(
        100_000, ge=1, description="Iteration cap of the load iteration"
    )
    divergence_load: float = Field(
        1e6, gt=0, description="Any load above this value is treated as divergence"
    )
    divergence_window: int = Field(
        100,
        ge=1,
        description="Consecutive residual increases treated as divergence",
    )
    power_tolerance: float = Field(
        1e-12, gt=0, description="Relative tolerance of the spectral radius iteration"
    )
    power_max_iterations: int = Field(
        100_000, ge=1, description="Iteration cap of the spectral radius iteration"
    )
    radius_margin: float = Field(
        1e-9, ge=0, description="Margin under which 'r < bound' is decided"
    )
    admissibility_tolerance: float = Field(
        1e-9, ge=0, description="Slack on the generalized-utility criterion"
    )
    barrier_mu: float = Field(1.0, gt=0, description="Initial barrier weight")
    barrier_mu_min: float = Field(
        1e-9, gt=0, description="Barrier weight at which the solver terminates"
    )
    newton_max_iterations: int = Field(
        100, ge=1, description="Newton steps allowed per barrier weight"
    )
    lin_restarts: int = Field(
        8, ge=1, description="Deterministic starts used for the linear utility"
    )
    demand_floor: float = Field(
        1e-12, gt=0, description="Per-cell minimum demand kept by the solver"
    )
    rho_step: float = Field(
        0.005, gt=0, le=0.1, description="Step of the rho grid searched for the load cap"
    )
    load_cap_slack: float = Field(
        1e-9, ge=0, description="Slack on the maximum-load test x_max <= 1 - eps"
    )
    load_epsilon: float = Field(
        0.0, ge=0, lt=1, description="Target margin eps of the maximum load"
    )


class Settings(BaseModel):
    debug: bool = Field(False, description="Enable debug mode")
    log_path: Optional[str] = Field(
        None,
        description="Path to log file (default: log to stdout)",
    )
    workers: int = Field(
        1,
        ge=1,
        description="Number of rho values solved concurrently in sweeps",
    )
    solver: SolverSettings = Field(
        default_factory=SolverSettings,
        description="Numerical tolerances and iteration budgets",
    )


class User(BaseModel):
    model_config = ConfigDict(frozen=True)

    regular_cell: int
    complementary_cell: int
    index: int = Field(0, description="Position of the user within its regular cell")
    position: Optional[Tuple[float, float]] = None


class Topology(BaseModel):
    """
    Regular and complementary cells, their users and the resolved channel gains.

    Gains are stored transmitter-major: rows ``0..n-1`` are the regular cells,
    rows ``n..n+n'-1`` the complementary cells, one column per user.
    """

    model_config = ConfigDict(frozen=True)

    mode: Mode = Mode.WIFI
    regular_cells: List[str]
    complementary_cells: List[str]
    users: List[User]
    regular_powers: List[float]
    complementary_powers: List[float]
    noise: float
    gains: List[List[float]]
    regular_positions: Optional[List[Tuple[float, float]]] = None
    complementary_positions: Optional[List[Tuple[float, float]]] = None

    _gain_matrix: np.ndarray = PrivateAttr()
    _regular_index: np.ndarray = PrivateAttr()
    _complementary_index: np.ndarray = PrivateAttr()
    _networks: Optional[tuple] = PrivateAttr(default=None)

    @model_validator(mode="after")
    def check_shapes(self) -> "Topology":
        n, n_comp = len(self.regular_cells), len(self.complementary_cells)
        if len(self.regular_powers) != n:
            raise ValueError("regular_powers must have one entry per regular cell")
        if len(self.complementary_powers) != n_comp:
            raise ValueError(
                "complementary_powers must have one entry per complementary cell"
            )
        if len(self.gains) != n + n_comp:
            raise ValueError("gains must have one row per transmitter")
        for row in self.gains:
            if len(row) != len(self.users):
                raise ValueError("every gains row must have one entry per user")
        if self.regular_positions is not None and len(self.regular_positions) != n:
            raise ValueError("regular_positions must match regular_cells")
        if (
            self.complementary_positions is not None
            and len(self.complementary_positions) != n_comp
        ):
            raise ValueError("complementary_positions must match complementary_cells")
        return self

    def model_post_init(self, __context):
        super().model_post_init(__context)
        shape = (self.n_transmitters, len(self.users))
        self._gain_matrix = np.asarray(self.gains, dtype=float).reshape(shape)
        self._gain_matrix.setflags(write=False)
        self._regular_index = np.array(
            [u.regular_cell for u in self.users], dtype=int
        )
        self._complementary_index = np.array(
            [u.complementary_cell for u in self.users], dtype=int
        )

    def __eq__(self, other):
        # Private numpy caches are derived from the fields and stay out of equality.
        if not isinstance(other, Topology):
            return NotImplemented
        return self.__dict__ == other.__dict__

    __hash__ = None

    def model_copy(self, *, update=None, deep: bool = False) -> "Topology":
        # Derived arrays and cached networks are rebuilt from the updated fields.
        if not update:
            return super().model_copy(deep=deep)
        return Topology.model_validate({**self.__dict__, **update})

    @property
    def n(self) -> int:
        return len(self.regular_cells)

    @property
    def n_complementary(self) -> int:
        return len(self.complementary_cells)

    @property
    def n_transmitters(self) -> int:
        return self.n + self.n_complementary

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def gain_matrix(self) -> np.ndarray:
        return self._gain_matrix

    @property
    def regular_index(self) -> np.ndarray:
        return self._regular_index

    @property
    def complementary_index(self) -> np.ndarray:
        return self._complementary_index

    @property
    def powers(self) -> np.ndarray:
        return np.asarray(self.regular_powers + self.complementary_powers, dtype=float)


def _check_finite_nonnegative(values: List[float]) -> List[float]:
    for v in values:
        if not math.isfinite(v) or v < 0:
            raise ValueError(f"demands must be finite and nonnegative, got {v!r}")
    return values


class DemandCap(BaseModel):
    """Per-user demand caps D_ij in nat (normalized so that MB = 1)."""

    model_config = ConfigDict(frozen=True)

    caps: List[float]

    @classmethod
    def uniform(cls, topology: Topology, cap: float) -> "DemandCap":
        return cls(caps=[float(cap)] * topology.n_users)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.caps, dtype=float)


class DemandAllocation(BaseModel):
    """Same-demand allocation: one demand per regular and per complementary cell."""

    model_config = ConfigDict(frozen=True)

    regular: List[float]
    complementary: List[float]

    _validate_regular = field_validator("regular")(_check_finite_nonnegative)
    _validate_complementary = field_validator("complementary")(
        _check_finite_nonnegative
    )

    @classmethod
    def from_arrays(cls, regular, complementary) -> "DemandAllocation":
        return cls(
            regular=[float(v) for v in np.ravel(regular)],
            complementary=[float(v) for v in np.ravel(complementary)],
        )

    def as_array(self) -> np.ndarray:
        return np.asarray(self.regular + self.complementary, dtype=float)

    def scaled(self, factor: float) -> "DemandAllocation":
        return DemandAllocation.from_arrays(
            np.asarray(self.regular) * factor, np.asarray(self.complementary) * factor
        )

    def user_totals(self, topology: Topology) -> np.ndarray:
        """Demand served to every user: d_i + d'_a(i,j)."""
        regular = np.asarray(self.regular, dtype=float)
        complementary = np.asarray(self.complementary, dtype=float)
        return (
            regular[topology.regular_index]
            + complementary[topology.complementary_index]
        )

    def cap_violations(
        self, topology: Topology, caps: DemandCap, tolerance: float = 1e-9
    ) -> List[ValidationIssue]:
        excess = self.user_totals(topology) - caps.as_array()
        return [
            ValidationIssue(
                entity=f"user[{j}]",
                field="demand",
                message=f"served demand exceeds cap by {excess[j]:.3e}",
            )
            for j in np.flatnonzero(excess > tolerance)
        ]


class UtilityWeights(BaseModel):
    """Per-user weights k_ij (regular side) and k' (complementary side)."""

    model_config = ConfigDict(frozen=True)

    regular: List[float]
    complementary: List[float]

    @classmethod
    def uniform(
        cls, topology: Topology, weight: float = 1.0, complementary_weight: float = 1.0
    ) -> "UtilityWeights":
        return cls(
            regular=[float(weight)] * topology.n_users,
            complementary=[float(complementary_weight)] * topology.n_users,
        )

    def aggregate(self, topology: Topology) -> Tuple[np.ndarray, np.ndarray]:
        """Per-cell aggregates k_i and k'_a."""
        k = np.bincount(
            topology.regular_index,
            weights=np.asarray(self.regular, dtype=float),
            minlength=topology.n,
        )
        k_comp = np.bincount(
            topology.complementary_index,
            weights=np.asarray(self.complementary, dtype=float),
            minlength=topology.n_complementary,
        )
        return k, k_comp


class LoadVector(BaseModel):
    model_config = ConfigDict(frozen=True)

    regular: List[float]
    complementary: List[float]

    @classmethod
    def zeros(cls, topology: Topology) -> "LoadVector":
        return cls(regular=[0.0] * topology.n, complementary=[0.0] * topology.n_complementary)

    @classmethod
    def from_array(cls, topology: Topology, values) -> "LoadVector":
        values = np.ravel(np.asarray(values, dtype=float))
        return cls(
            regular=[float(v) for v in values[: topology.n]],
            complementary=[float(v) for v in values[topology.n :]],
        )

    def as_array(self) -> np.ndarray:
        return np.asarray(self.regular + self.complementary, dtype=float)

    @property
    def max(self) -> float:
        values = self.regular + self.complementary
        return max(values) if values else 0.0


class IterationSchedule(BaseModel):
    """
    Synchronous or asynchronous load iteration.

    ``order`` lists global cell indices (regular cells first, then complementary
    cells); each network visits its own cells in that relative order.
    """

    model_config = ConfigDict(frozen=True)

    kind: ScheduleKind = ScheduleKind.SYNCHRONOUS
    order: Optional[List[int]] = None
    inner_repeats: int = Field(1, ge=1)

    @classmethod
    def synchronous(cls) -> "IterationSchedule":
        return cls(kind=ScheduleKind.SYNCHRONOUS)

    @classmethod
    def asynchronous(
        cls, order: Optional[List[int]] = None, inner_repeats: int = 1
    ) -> "IterationSchedule":
        return cls(kind=ScheduleKind.ASYNCHRONOUS, order=order, inner_repeats=inner_repeats)


class GridScenarioParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    rows: int = Field(3, ge=1, description="Macro grid rows")
    cols: int = Field(3, ge=1, description="Macro grid columns")
    side: float = Field(2.0, gt=0, description="Macro cell side length")
    per_macro: int = Field(
        4, ge=1, description="Complementary cells per macro cell (a perfect square)"
    )
    users_per_cell: int = Field(5, ge=1, description="Users per complementary cell")
    kappa: float = Field(4.0, gt=0, description="Path-loss exponent")
    macro_power: float = Field(100.0, gt=0)
    complementary_power: float = Field(1.0, gt=0)
    noise: float = Field(0.01, gt=0)
    weight: float = Field(1.0, ge=0, description="Per-user weight k on the regular side")
    complementary_weight: float = Field(
        0.25, ge=0, description="Per-user weight k' on the complementary side"
    )
    cap: float = Field(0.1, ge=0, description="Demand cap D applied to all users")
    mode: Mode = Mode.WIFI
    seed: int = Field(0, ge=0)

    @field_validator("per_macro")
    @classmethod
    def validate_per_macro(cls, v: int) -> int:
        root = math.isqrt(v)
        if root * root != v:
            raise ValueError("per_macro must be a perfect square (e.g. 1, 4, 9)")
        return v


class Scenario(BaseModel):
    model_config = ConfigDict(frozen=True)

    schema_version: int = SCHEMA_VERSION
    seed: Optional[int] = None
    params: Optional[GridScenarioParams] = None
    topology: Topology
    caps: DemandCap
    weights: UtilityWeights


class ProblemSpec(BaseModel):
    """Inputs of Problem Q(rho); rho = 1 recovers the unconstrained-load problem."""

    model_config = ConfigDict(frozen=True)

    topology: Topology
    caps: DemandCap
    weights: UtilityWeights
    utility: str = Field("log", description="lin, log, dlog or a registered utility")
    rho: float = Field(1.0, gt=0, le=1)
    solver: SolverSettings = Field(default_factory=SolverSettings)
    regular_limits: Optional[List[float]] = None
    complementary_limits: Optional[List[float]] = None
    spectral_constraints: bool = True
    seed: Optional[int] = Field(None, description="Seed of the scenario the inputs came from")

    @field_validator("utility", mode="before")
    @classmethod
    def validate_utility(cls, v) -> str:
        return v.value if isinstance(v, Enum) else str(v).lower()

    def with_rho(self, rho: float) -> "ProblemSpec":
        return ProblemSpec.model_validate({**self.__dict__, "rho": rho})

    @classmethod
    def from_scenario(cls, scenario: Scenario, **kwargs) -> "ProblemSpec":
        kwargs.setdefault("seed", scenario.seed)
        return cls(
            topology=scenario.topology,
            caps=scenario.caps,
            weights=scenario.weights,
            **kwargs,
        )


class SolveReport(BaseModel):
    utility: str
    rho: float
    seed: Optional[int] = None
    regular_demands: List[float]
    complementary_demands: List[float]
    regular_transformed: List[float]
    complementary_transformed: List[float]
    loads: LoadVector
    x_max: float
    sum_utility: float
    radii: Dict[str, float]
    radius_active: Dict[str, bool]
    served_demand: List[float]
    total_demand: float
    mean_user_demand: float
    newton_iterations: int
    barrier_rounds: int
    restarts: int = 1
    converged: bool
    load_iterations: int
    load_converged: bool
    kkt_residual: float
    possibly_local: bool = False
    possibly_non_unique: bool = False

    @property
    def demands(self) -> DemandAllocation:
        return DemandAllocation(
            regular=self.regular_demands, complementary=self.complementary_demands
        )


class SweepRow(BaseModel):
    rho: float
    sum_utility: float
    x_max: float
    r_regular: float
    r_complementary: float
    converged: bool
    iterations: int
    wall_ms: float
    error: Optional[str] = None
