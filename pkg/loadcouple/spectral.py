import logging
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .exceptions import ConvergenceError, NonPositiveDemandError, ReducibleMatrixError, ValidationError
from .schemas import DemandAllocation, SolverSettings, Topology
from .topology import CellNetwork, get_network, networks_of

logger = logging.getLogger(__name__)

_STALL_WINDOW = 50
_ROUNDING_WIDTH = 64 * np.finfo(float).eps


@dataclass(frozen=True)
class CouplingMatrix:
    network: str
    template: np.ndarray
    demands: np.ndarray
    matrix: np.ndarray


class Feasibility(NamedTuple):
    radius: float
    feasible: bool


class RadiusDerivatives(NamedTuple):
    radius: float
    gradient: np.ndarray
    hessian: Optional[np.ndarray]


def network_coupling(network: CellNetwork, cell_demands: np.ndarray) -> np.ndarray:
    """Λ(d) = diag(d) Λ̃ for one network."""
    return np.asarray(cell_demands, dtype=float)[:, np.newaxis] * network.template


def coupling_matrix(topology: Topology, demands: DemandAllocation) -> Dict[str, CouplingMatrix]:
    """
    Coupling matrices of every network of the topology.

    WiFi mode returns ``regular`` and ``complementary`` matrices, SmallCell mode
    a single ``merged`` matrix over all transmitters.
    """
    result = {}
    for network in networks_of(topology):
        d = network.cell_demands(demands)
        if d.shape[0] != network.n_cells:
            raise ValidationError(
                f"{network.name.value} network has {network.n_cells} cells, got {d.shape[0]} demands"
            )
        result[network.name.value] = CouplingMatrix(
            network=network.name.value,
            template=network.template,
            demands=d,
            matrix=network_coupling(network, d),
        )
    return result


def _as_nonnegative_square(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValidationError(f"Expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValidationError("Matrix entries must be finite")
    if np.any(A < 0):
        raise ValidationError("Matrix entries must be nonnegative")
    return A


def _components(A: np.ndarray) -> Tuple[int, np.ndarray]:
    return connected_components(csr_matrix(A > 0), directed=True, connection="strong")


def is_irreducible(A) -> bool:
    """
    True iff some power of the incidence matrix of A is all-positive.

    Checked as strong connectivity of the graph of nonzero entries; a single
    cell only qualifies with a positive diagonal entry.
    """
    A = _as_nonnegative_square(A)
    if A.shape[0] <= 1:
        return bool(A.size) and bool(A[0, 0] > 0)
    count, _ = _components(A)
    return count == 1


def _inverse_step(B: np.ndarray, v: np.ndarray, shift: float) -> Optional[np.ndarray]:
    try:
        w = np.linalg.solve(shift * np.eye(B.shape[0]) - B, v)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        return None
    return w / w.max()


def _power_iteration(
    A: np.ndarray, settings: SolverSettings, start: Optional[np.ndarray] = None
) -> Tuple[float, np.ndarray]:
    """
    Perron root and right vector of an irreducible nonnegative matrix.

    Iterates on B + tI with B = A/alpha, alpha the largest row sum and t half
    the current lower bound on r(B), which keeps B + tI primitive. Stops once the
    Collatz-Wielandt bracket min(Bv/v) <= r <= max(Bv/v) is tight relative to
    the recovered radius.

    When the bracket stops shrinking (a second eigenvalue close to r), the
    iteration switches to inverse iteration with the shift max(Bv/v) + width,
    which lies above r so (shift I - B)^-1 stays positive.

    Raises:
        ConvergenceError: If the bracket is still wide after the iteration cap
    """
    size = A.shape[0]
    alpha = float(A.sum(axis=1).max())
    if alpha == 0.0:
        return 0.0, np.full(size, 1.0 / size)
    B = A / alpha
    v = np.ones(size) if start is None else np.maximum(np.array(start, dtype=float), 1e-300)
    v = v / v.max()
    previous, stalled, refine = np.inf, 0, False
    for _ in range(settings.power_max_iterations):
        s = B @ v
        ratios = s / v
        lo, hi = float(ratios.min()), float(ratios.max())
        width = hi - lo
        if width <= settings.power_tolerance * lo:
            return alpha * 0.5 * (lo + hi), v
        if width < previous * (1 - 1e-3):
            stalled = 0
        else:
            stalled += 1
            if stalled >= _STALL_WINDOW and width <= _ROUNDING_WIDTH * hi:
                logger.debug("Power iteration stalled at rounding level, bracket width %.3e", width)
                return alpha * 0.5 * (lo + hi), v
        previous = width
        if not refine and stalled >= _STALL_WINDOW:
            logger.debug("Bracket width %.3e stalled, switching to inverse iteration", width)
            refine, stalled = True, 0
        if refine:
            refined = _inverse_step(B, v, hi + width)
            if refined is not None:
                v = refined
                continue
            refine = False
        v = s + 0.5 * lo * v
        v = v / v.max()
    raise ConvergenceError(
        f"Spectral radius iteration did not converge in {settings.power_max_iterations} iterations"
    )


def spectral_radius(A, settings: Optional[SolverSettings] = None) -> float:
    """
    Spectral radius of a nonnegative square matrix.

    Reducible matrices are split into strongly connected components; the radius
    is the largest radius over the irreducible diagonal blocks.
    """
    settings = settings or SolverSettings()
    A = _as_nonnegative_square(A)
    if A.shape[0] == 0 or not A.any():
        return 0.0
    count, labels = _components(A)
    if count == 1:
        return max(_power_iteration(A, settings)[0], 0.0)
    radius = 0.0
    for label in range(count):
        block = np.flatnonzero(labels == label)
        if block.shape[0] == 1:
            radius = max(radius, float(A[block[0], block[0]]))
            continue
        sub = A[np.ix_(block, block)]
        radius = max(radius, _power_iteration(sub, settings)[0])
    return radius


def dense_spectral_radius(A) -> float:
    """Spectral radius from a dense eigensolve, used as a cross-check."""
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(A, dtype=float)))))


def batched_spectral_radius(stack: np.ndarray) -> np.ndarray:
    """Dense spectral radii of a stack of small square matrices."""
    stack = np.asarray(stack, dtype=float)
    if stack.shape[-1] == 1:
        return np.abs(stack[..., 0, 0])
    return np.max(np.abs(np.linalg.eigvals(stack)), axis=-1)


def perron_vectors(
    A, settings: Optional[SolverSettings] = None, start: Optional[Tuple[np.ndarray, np.ndarray]] = None
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Perron root with left and right eigenvectors normalized to unit sum.

    Args:
        A: Nonnegative irreducible square matrix
        settings: Power iteration tolerances
        start: Optional (left, right) warm start

    Returns:
        Tuple[float, np.ndarray, np.ndarray]: Radius r, left vector u, right vector v
    """
    settings = settings or SolverSettings()
    A = _as_nonnegative_square(A)
    if not is_irreducible(A):
        raise ReducibleMatrixError("Perron vectors require an irreducible matrix")
    if A.shape[0] == 1:
        return float(A[0, 0]), np.ones(1), np.ones(1)
    left_start, right_start = start if start is not None else (None, None)
    r, v = _power_iteration(A, settings, right_start)
    _, u = _power_iteration(A.T, settings, left_start)
    return r, u / u.sum(), v / v.sum()


def radius_derivatives(
    template: np.ndarray,
    cell_demands: np.ndarray,
    settings: Optional[SolverSettings] = None,
    hessian: bool = True,
    start: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> RadiusDerivatives:
    """
    Radius of diag(d) Λ̃ with its gradient and Hessian in d.

    The gradient is u∘(Λ̃v)/(uᵀv). Eigenvector sensitivities come from the
    bordered systems [[A - rI, -v], [1ᵀ, 0]] that pin the unit-sum scaling.
    """
    settings = settings or SolverSettings()
    d = np.asarray(cell_demands, dtype=float)
    size = d.shape[0]
    A = d[:, np.newaxis] * template
    r, u, v = perron_vectors(A, settings, start)
    q = template @ v
    w = float(u @ v)
    grad = u * q / w
    if not hessian:
        return RadiusDerivatives(r, grad, None)

    ones = np.ones(size)
    right = np.zeros((size + 1, size + 1))
    right[:size, :size] = A - r * np.eye(size)
    right[:size, size] = -v
    right[size, :size] = ones
    rhs = np.vstack([-np.diag(q), np.zeros((1, size))])
    dv = np.linalg.solve(right, rhs)[:size]

    left = np.zeros((size + 1, size + 1))
    left[:size, :size] = A.T - r * np.eye(size)
    left[:size, size] = -u
    left[size, :size] = ones
    rhs = np.vstack([-template.T * u[np.newaxis, :], np.zeros((1, size))])
    du = np.linalg.solve(left, rhs)[:size]

    dw = du.T @ v + dv.T @ u
    H = (q[:, np.newaxis] * du + u[:, np.newaxis] * (template @ dv)) / w
    H -= np.outer(grad, dw) / w
    return RadiusDerivatives(r, grad, 0.5 * (H + H.T))


def _positive_demands(topology: Topology, demands: DemandAllocation) -> None:
    values = demands.as_array()
    if values.shape[0] != topology.n_transmitters:
        raise ValidationError("Demand allocation does not match the topology")
    if np.any(values <= 0):
        raise NonPositiveDemandError("Feasibility requires positive demand in every cell")


def network_radii(
    topology: Topology, demands: DemandAllocation, settings: Optional[SolverSettings] = None
) -> Dict[str, float]:
    return {
        name: spectral_radius(coupling.matrix, settings)
        for name, coupling in coupling_matrix(topology, demands).items()
    }


def feasibility_margin(
    topology: Topology, demands: DemandAllocation, settings: Optional[SolverSettings] = None
) -> Feasibility:
    """
    Largest network radius and whether every radius satisfies r <= 1 - margin.

    Raises:
        NonPositiveDemandError: If any cell has zero demand
    """
    settings = settings or SolverSettings()
    _positive_demands(topology, demands)
    radii = network_radii(topology, demands, settings)
    radius = max(radii.values())
    feasible = all(r <= 1.0 - settings.radius_margin for r in radii.values())
    logger.debug("Feasibility radii %s -> %s", radii, "feasible" if feasible else "infeasible")
    return Feasibility(radius, feasible)


def two_cell_radius_oracle(
    topology: Topology, demands: DemandAllocation, network: str = "regular"
) -> float:
    """Closed-form radius sqrt(d1 d2 (sum g2/g1)(sum g1/g2)) of a two-cell network."""
    cells = get_network(topology, network)
    if cells.n_cells != 2:
        raise ValidationError(f"Two-cell oracle needs 2 cells, {cells.name.value} network has {cells.n_cells}")
    d = cells.cell_demands(demands)
    g = cells.gains
    first, second = cells.members
    sum_12 = np.sum(g[1, first] / g[0, first])
    sum_21 = np.sum(g[0, second] / g[1, second])
    return float(np.sqrt(d[0] * d[1] * sum_12 * sum_21))
