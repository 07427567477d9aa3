import logging
from enum import Enum
from functools import lru_cache
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy.optimize import brentq

from .exceptions import UtilityDomainError, ValidationError
from .schemas import DemandAllocation, Topology, UtilityKind, UtilityWeights

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


class Admissibility(str, Enum):
    STRICTLY_ADMISSIBLE = "strictly-admissible"
    NOT_ADMISSIBLE = "not-admissible"
    INCONCLUSIVE = "inconclusive"


class AdmissibilityReport(BaseModel):
    utility: str
    verdict: Admissibility
    on_boundary: bool = Field(
        False, description="Criterion vanishes on the grid (convex but not strictly)"
    )
    max_criterion: Optional[float] = Field(
        None, description="Largest value of d*U''(d) + U'(d) on the grid"
    )
    inverse_log_convex: Optional[bool] = Field(
        None, description="Second differences of log g(y) are all positive"
    )
    grid_points: int


class Utility(BaseModel):
    """
    A strictly increasing utility U with its inverse g = U^-1.

    Derivatives that are not supplied fall back to central differences with
    step 1e-5 * max(1, d); a missing inverse is found by bracketing with brentq.
    """

    name: str
    title: str
    description: Optional[str] = None
    allows_zero: bool = Field(False, description="U is defined at d = 0")
    positive_range: bool = Field(False, description="Inverse accepts only y > 0")
    value: Callable = Field(exclude=True)
    derivative: Optional[Callable] = Field(None, exclude=True)
    second_derivative: Optional[Callable] = Field(None, exclude=True)
    inverse: Optional[Callable] = Field(None, exclude=True)
    inverse_derivative: Optional[Callable] = Field(None, exclude=True)
    inverse_second_derivative: Optional[Callable] = Field(None, exclude=True)

    def _check_domain(self, d: np.ndarray) -> None:
        if not np.all(np.isfinite(d)):
            raise UtilityDomainError(f"{self.name} utility needs finite demands")
        if self.allows_zero:
            if np.any(d < 0):
                raise UtilityDomainError(f"{self.name} utility is undefined for d < 0")
        elif np.any(d <= 0):
            raise UtilityDomainError(f"{self.name} utility is undefined for d <= 0")

    def __call__(self, d: ArrayLike) -> ArrayLike:
        arr = np.asarray(d, dtype=float)
        self._check_domain(arr)
        return _like(d, self.value(arr))

    def _step(self, d: np.ndarray) -> np.ndarray:
        return 1e-5 * np.maximum(1.0, d)

    def first(self, d: ArrayLike) -> ArrayLike:
        arr = np.asarray(d, dtype=float)
        self._check_domain(arr)
        if self.derivative is not None:
            return _like(d, self.derivative(arr))
        h = self._step(arr)
        back = np.where(arr - h > 0, arr - h, arr)
        return _like(d, (self.value(arr + h) - self.value(back)) / (arr + h - back))

    def second(self, d: ArrayLike) -> ArrayLike:
        arr = np.asarray(d, dtype=float)
        self._check_domain(arr)
        if self.second_derivative is not None:
            return _like(d, self.second_derivative(arr))
        h = self._step(arr)
        centre = np.where(arr - h > 0, arr, arr + h)
        values = self.value(centre + h) - 2 * self.value(centre) + self.value(centre - h)
        return _like(d, values / h**2)

    def invert(self, y: ArrayLike) -> ArrayLike:
        arr = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise UtilityDomainError(f"{self.name} inverse needs finite values")
        if self.positive_range and np.any(arr <= 0):
            raise UtilityDomainError(f"{self.name} inverse is only defined for y > 0")
        if self.inverse is not None:
            return _like(y, self.inverse(arr))
        flat = np.array([self._solve(float(v)) for v in arr.ravel()])
        return _like(y, flat.reshape(arr.shape))

    def _solve(self, y: float) -> float:
        lo, hi = 1e-12, 1.0
        while self.value(np.float64(hi)) < y:
            hi *= 2.0
            if hi > 1e300:
                raise UtilityDomainError(f"{self.name} never reaches {y!r}")
        while self.value(np.float64(lo)) > y:
            lo *= 0.5
            if lo < 1e-300:
                raise UtilityDomainError(f"{self.name} stays above {y!r} near zero")
        return brentq(lambda d: self.value(np.float64(d)) - y, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps)

    def inverse_derivatives(self, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """g(y), g'(y) and g''(y)."""
        y = np.asarray(y, dtype=float)
        g = np.asarray(self.invert(y), dtype=float)
        if self.inverse_derivative is not None and self.inverse_second_derivative is not None:
            return g, self.inverse_derivative(y), self.inverse_second_derivative(y)
        g1 = 1.0 / np.asarray(self.first(g), dtype=float)
        g2 = -np.asarray(self.second(g), dtype=float) * g1**3
        return g, g1, g2


def _like(template, values):
    values = np.asarray(values, dtype=float)
    if np.ndim(template) == 0:
        return float(values)
    return values


_REGISTRY: Dict[str, Utility] = {}


def _add(utility: Utility) -> Utility:
    if utility.name in _REGISTRY:
        raise ValueError(f"Utility {utility.name} is already registered")
    _REGISTRY[utility.name] = utility
    return utility


def _dlog_first(d):
    return 1.0 / ((1.0 + d) * np.log1p(d))


def _dlog_second(d):
    log1p = np.log1p(d)
    return -(log1p + 1.0) / ((1.0 + d) ** 2 * log1p**2)


def _dlog_inverse_first(y):
    e = np.exp(y)
    return e * np.exp(e)


def _dlog_inverse_second(y):
    e = np.exp(y)
    return e * np.exp(e) * (1.0 + e)


_add(
    Utility(
        name=UtilityKind.LIN.value,
        title="Linear",
        description="U(d) = d; total-throughput revenue",
        allows_zero=True,
        positive_range=True,
        value=lambda d: d,
        derivative=np.ones_like,
        second_derivative=np.zeros_like,
        inverse=lambda y: y,
        inverse_derivative=np.ones_like,
        inverse_second_derivative=np.zeros_like,
    )
)
_add(
    Utility(
        name=UtilityKind.LOG.value,
        title="Logarithmic",
        description="U(d) = log d; proportional fairness",
        value=np.log,
        derivative=lambda d: 1.0 / d,
        second_derivative=lambda d: -1.0 / d**2,
        inverse=np.exp,
        inverse_derivative=np.exp,
        inverse_second_derivative=np.exp,
    )
)
_add(
    Utility(
        name=UtilityKind.DLOG.value,
        title="Double logarithmic",
        description="U(d) = log(log(1 + d)); stronger fairness than LOG",
        value=lambda d: np.log(np.log1p(d)),
        derivative=_dlog_first,
        second_derivative=_dlog_second,
        inverse=lambda y: np.expm1(np.exp(y)),
        inverse_derivative=_dlog_inverse_first,
        inverse_second_derivative=_dlog_inverse_second,
    )
)


def register_utility(
    name: Optional[str] = None,
    title: Optional[str] = None,
    derivative: Optional[Callable] = None,
    second_derivative: Optional[Callable] = None,
    inverse: Optional[Callable] = None,
):
    """Decorator to register a custom utility U(d) defined for d > 0."""

    def decorator(func: Callable):
        key = (name or func.__name__).lower()
        _add(
            Utility(
                name=key,
                title=title or key,
                description=func.__doc__,
                value=func,
                derivative=derivative,
                second_derivative=second_derivative,
                inverse=inverse,
            )
        )
        get_registered_utilities.cache_clear()
        return func

    return decorator


@lru_cache
def get_registered_utilities() -> Dict[str, Utility]:
    return dict(_REGISTRY)


def get_utility(kind: Union[str, UtilityKind, Utility]) -> Utility:
    if isinstance(kind, Utility):
        return kind
    key = kind.value if isinstance(kind, UtilityKind) else str(kind).lower()
    if key not in _REGISTRY:
        raise ValidationError(f"Utility {key} not found in registry")
    return _REGISTRY[key]


def utility_value(kind, d: ArrayLike) -> ArrayLike:
    return get_utility(kind)(d)


def utility_inverse(kind, y: ArrayLike) -> ArrayLike:
    return get_utility(kind).invert(y)


def sum_utility(
    topology: Topology, weights: UtilityWeights, demands: DemandAllocation, kind
) -> float:
    """
    Weighted sum utility in aggregated form.

    Equals sum_i sum_j [k_ij U(d_i) + k'_ij U(d'_a(i,j))] for the per-user weights.
    """
    utility = get_utility(kind)
    k, k_comp = weights.aggregate(topology)
    d = np.asarray(demands.regular, dtype=float)
    d_comp = np.asarray(demands.complementary, dtype=float)
    return float(k @ utility(d) + k_comp @ utility(d_comp))


def admissibility_check(
    kind, grid: Optional[np.ndarray] = None, tolerance: float = 1e-9
) -> AdmissibilityReport:
    """
    Test the condition d*U''(d) + U'(d) < 0 on a grid of demands.

    A negative criterion everywhere makes g = U^-1 strictly log-convex, which
    is cross-checked through second differences of log g on a uniform y-grid.

    Args:
        kind: Built-in kind, registered name or Utility
        grid: Positive demand values, geomspace(1e-3, 10, 200) by default
        tolerance: Slack on the strict inequality

    Returns:
        AdmissibilityReport: Verdict with the supporting numbers
    """
    utility = get_utility(kind)
    grid = np.geomspace(1e-3, 10.0, 200) if grid is None else np.sort(np.asarray(grid, dtype=float))
    try:
        criterion = grid * np.asarray(utility.second(grid)) + np.asarray(utility.first(grid))
    except (UtilityDomainError, FloatingPointError, OverflowError) as exc:
        logger.debug("Admissibility evaluation failed for %s: %s", utility.name, exc)
        return AdmissibilityReport(
            utility=utility.name, verdict=Admissibility.INCONCLUSIVE, grid_points=grid.shape[0]
        )
    if not np.all(np.isfinite(criterion)):
        return AdmissibilityReport(
            utility=utility.name, verdict=Admissibility.INCONCLUSIVE, grid_points=grid.shape[0]
        )

    log_convex = _inverse_log_convex(utility, grid, tolerance)
    worst = float(criterion.max())
    if worst < -tolerance:
        verdict, boundary = Admissibility.STRICTLY_ADMISSIBLE, False
    else:
        verdict = Admissibility.NOT_ADMISSIBLE
        scale = np.maximum(1.0, np.abs(np.asarray(utility.first(grid))))
        boundary = bool(np.all(np.abs(criterion) <= tolerance * scale))
    if log_convex is not None and log_convex != (verdict is Admissibility.STRICTLY_ADMISSIBLE):
        logger.warning(
            "Admissibility criterion and inverse log-convexity disagree for %s", utility.name
        )
    return AdmissibilityReport(
        utility=utility.name,
        verdict=verdict,
        on_boundary=boundary,
        max_criterion=worst,
        inverse_log_convex=log_convex,
        grid_points=grid.shape[0],
    )


def _inverse_log_convex(utility: Utility, grid: np.ndarray, tolerance: float) -> Optional[bool]:
    with np.errstate(all="ignore"):
        ys = np.linspace(float(utility(grid[0])), float(utility(grid[-1])), grid.shape[0])
        log_g = np.log(np.asarray(utility.invert(ys), dtype=float))
    if not np.all(np.isfinite(log_g)):
        return None
    step = ys[1] - ys[0]
    second = np.diff(log_g, 2)
    return bool(np.all(second > tolerance * step**2))
