import logging
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import nnls

from .exceptions import (
    ConvergenceError,
    DemandValidationError,
    LoadCapError,
    LoadCoupleError,
    UtilityDomainError,
)
from .loads import fixed_point_load
from .schemas import (
    DemandAllocation,
    ProblemSpec,
    SolveReport,
    SolverSettings,
    Topology,
    UtilityKind,
    UtilityWeights,
)
from .spectral import network_radii, perron_vectors, radius_derivatives, spectral_radius
from .topology import CellNetwork, networks_of, require_valid, restrict_users
from .utility import Utility, get_utility, sum_utility
from .utils import rho_grid

logger = logging.getLogger(__name__)

_ARMIJO = 0.25
_BACKTRACK = 0.5
_MIN_STEP = 1e-14
_ACTIVE_SLACK = 1e-5
_RESTART_LOW = 0.1


class BarrierSolver:
    """
    Log-barrier Newton ascent for Problem Q(rho) in transformed coordinates.

    The variable z stacks y (regular cells) and y' (complementary cells) with
    d = g(z). Constraints are kept strictly feasible as slacks:

    * radius: (rho - margin) - r(diag(d_net) Λ̃_net) for every network with 2+ cells
    * caps: D - d_i - d'_a for every distinct (regular, complementary) pair
    * floors: z - U(floor)
    * limits: L - d for cells with a per-cell demand limit
    """

    def __init__(self, spec: ProblemSpec, topology: Topology, weights: UtilityWeights, caps: np.ndarray):
        self.spec = spec
        self.settings: SolverSettings = spec.solver
        self.topology = topology
        self.utility: Utility = get_utility(spec.utility)
        self.size = topology.n_transmitters
        k, k_comp = weights.aggregate(topology)
        self.weights = np.concatenate([k, k_comp])
        self.bound = spec.rho - self.settings.radius_margin
        self.networks: List[CellNetwork] = [
            net for net in networks_of(topology) if spec.spectral_constraints and net.n_cells >= 2
        ]

        pairs: Dict[Tuple[int, int], float] = {}
        n = topology.n
        for user, cap in zip(topology.users, caps):
            key = (user.regular_cell, n + user.complementary_cell)
            pairs[key] = min(cap, pairs.get(key, np.inf))
        self.pair_cells = np.array(sorted(pairs), dtype=int).reshape(-1, 2)
        self.pair_caps = np.array([pairs[tuple(p)] for p in self.pair_cells], dtype=float)
        self.floor = float(self.utility(self.settings.demand_floor))

        limits = np.full(self.size, np.inf)
        if spec.regular_limits is not None:
            limits[:n] = spec.regular_limits
        if spec.complementary_limits is not None:
            limits[n:] = spec.complementary_limits
        self.limit_index = np.flatnonzero(np.isfinite(limits))
        self.limit_values = limits[self.limit_index]
        self._starts: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}

    def _slice(self, net: CellNetwork) -> slice:
        return slice(net.offset, net.offset + net.n_cells)

    def _radius(self, net: CellNetwork, d: np.ndarray) -> float:
        r, u, v = perron_vectors(d[:, np.newaxis] * net.template, self.settings, self._starts.get(net.name.value))
        self._starts[net.name.value] = (u, v)
        return r

    def slacks(self, z: np.ndarray) -> Optional[np.ndarray]:
        """All constraint slacks at z, or None when z is not strictly feasible."""
        if not np.all(np.isfinite(z)):
            return None
        floors = z - self.floor
        if np.any(floors <= 0):
            return None
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                d = np.asarray(self.utility.invert(z), dtype=float)
        except UtilityDomainError:
            return None
        if not np.all(np.isfinite(d)) or np.any(d <= 0):
            return None
        caps = self.pair_caps - d[self.pair_cells[:, 0]] - d[self.pair_cells[:, 1]]
        if np.any(caps <= 0):
            return None
        limits = self.limit_values - d[self.limit_index]
        if np.any(limits <= 0):
            return None
        radius = np.array([self.bound - self._radius(net, d[self._slice(net)]) for net in self.networks])
        if np.any(radius <= 0):
            return None
        return np.concatenate([floors, caps, limits, radius])

    def barrier_value(self, z: np.ndarray, slacks: np.ndarray, mu: float) -> float:
        return float(self.weights @ z + mu * np.sum(np.log(slacks)))

    def derivatives(self, z: np.ndarray, mu: float) -> Tuple[np.ndarray, np.ndarray]:
        """Gradient and Hessian of the barrier objective."""
        g, g1, g2 = self.utility.inverse_derivatives(z)
        grad = self.weights.astype(float)
        hess = np.zeros((self.size, self.size))
        diag = np.arange(self.size)

        s = z - self.floor
        grad += mu / s
        hess[diag, diag] -= mu / s**2

        i, j = self.pair_cells[:, 0], self.pair_cells[:, 1]
        s = self.pair_caps - g[i] - g[j]
        coef, sq = mu / s, mu / s**2
        np.add.at(grad, i, -coef * g1[i])
        np.add.at(grad, j, -coef * g1[j])
        np.add.at(hess, (i, i), -coef * g2[i] - sq * g1[i] ** 2)
        np.add.at(hess, (j, j), -coef * g2[j] - sq * g1[j] ** 2)
        np.add.at(hess, (i, j), -sq * g1[i] * g1[j])
        np.add.at(hess, (j, i), -sq * g1[i] * g1[j])

        idx = self.limit_index
        s = self.limit_values - g[idx]
        coef, sq = mu / s, mu / s**2
        grad[idx] -= coef * g1[idx]
        hess[idx, idx] -= coef * g2[idx] + sq * g1[idx] ** 2

        for net in self.networks:
            sl = self._slice(net)
            r, G, Hd = radius_derivatives(net.template, g[sl], self.settings, True, self._starts.get(net.name.value))
            s = self.bound - r
            ds = -G * g1[sl]
            Hs = -(g1[sl, np.newaxis] * Hd * g1[np.newaxis, sl] + np.diag(G * g2[sl]))
            grad[sl] += mu * ds / s
            hess[sl, sl] += mu * (Hs / s - np.outer(ds, ds) / s**2)
        return grad, hess

    def _direction(self, grad: np.ndarray, hess: np.ndarray) -> np.ndarray:
        system = -hess
        scale = max(1.0, float(np.max(np.abs(np.diag(system)))))
        shift = 0.0
        for _ in range(80):
            try:
                factor = cho_factor(system + shift * np.eye(self.size))
                return cho_solve(factor, grad)
            except LinAlgError:
                # Nonconvex radius under LIN: fall back to a regularized step.
                shift = max(2.0 * shift, 1e-12 * scale)
        raise ConvergenceError("Newton system could not be regularized")

    def centre(self, z: np.ndarray, mu: float) -> Tuple[np.ndarray, int, bool]:
        """Newton ascent on the barrier objective at fixed mu."""
        slacks = self.slacks(z)
        value = self.barrier_value(z, slacks, mu)
        for iteration in range(1, self.settings.newton_max_iterations + 1):
            grad, hess = self.derivatives(z, mu)
            step = self._direction(grad, hess)
            decrement = float(grad @ step)
            if 0.5 * decrement <= max(mu * 1e-3, 1e-13 * max(1.0, abs(value))):
                return z, iteration, True
            t = 1.0
            while True:
                trial = z + t * step
                trial_slacks = self.slacks(trial)
                if trial_slacks is not None:
                    trial_value = self.barrier_value(trial, trial_slacks, mu)
                    if trial_value >= value + _ARMIJO * t * decrement:
                        break
                t *= _BACKTRACK
                if t < _MIN_STEP:
                    logger.debug("Line search stalled at mu=%.3e (decrement %.3e)", mu, decrement)
                    return z, iteration, True
            z, value = trial, trial_value
        return z, self.settings.newton_max_iterations, False

    def run(self, z0: np.ndarray) -> Tuple[np.ndarray, int, int, bool]:
        if self.slacks(z0) is None:
            raise ConvergenceError("Initial point is not strictly feasible")
        z = z0
        mu = self.settings.barrier_mu
        iterations, rounds, converged = 0, 0, True
        while mu >= self.settings.barrier_mu_min:
            z, its, converged = self.centre(z, mu)
            iterations += its
            rounds += 1
            mu *= 0.5
        return z, iterations, rounds, converged

    def initial_demands(self) -> np.ndarray:
        """Uniform per-network demands at radius rho/2, halved against caps and limits."""
        d = np.full(self.size, np.inf)
        for net in self.networks:
            r = spectral_radius(net.template, self.settings)
            if r > 0:
                d[self._slice(net)] = 0.5 * self.spec.rho / r
        quarter = self.pair_caps / 4.0
        np.minimum.at(d, self.pair_cells[:, 0], quarter)
        np.minimum.at(d, self.pair_cells[:, 1], quarter)
        d[self.limit_index] = np.minimum(d[self.limit_index], self.limit_values / 2.0)
        if not np.all(np.isfinite(d)) or np.any(d <= self.settings.demand_floor):
            raise ConvergenceError("Caps or limits leave no room above the demand floor")
        return d

    def kkt_residual(self, z: np.ndarray) -> float:
        """Relative stationarity residual of k = sum(lambda * -grad s) over near-active constraints."""
        g, g1, _ = self.utility.inverse_derivatives(z)
        columns = []
        for c in np.flatnonzero(z - self.floor <= _ACTIVE_SLACK):
            col = np.zeros(self.size)
            col[c] = 1.0
            columns.append(col)
        caps = self.pair_caps - g[self.pair_cells[:, 0]] - g[self.pair_cells[:, 1]]
        for p in np.flatnonzero(caps <= _ACTIVE_SLACK):
            i, j = self.pair_cells[p]
            col = np.zeros(self.size)
            col[i] -= g1[i]
            col[j] -= g1[j]
            columns.append(col)
        limits = self.limit_values - g[self.limit_index]
        for c in self.limit_index[limits <= _ACTIVE_SLACK]:
            col = np.zeros(self.size)
            col[c] = -g1[c]
            columns.append(col)
        for net in self.networks:
            sl = self._slice(net)
            r, G, _ = radius_derivatives(net.template, g[sl], self.settings, False)
            if self.bound - r <= _ACTIVE_SLACK:
                col = np.zeros(self.size)
                col[sl] = -G * g1[sl]
                columns.append(col)
        scale = max(1.0, float(np.linalg.norm(self.weights)))
        if not columns:
            return float(np.linalg.norm(self.weights)) / scale
        _, residual = nnls(-np.column_stack(columns), self.weights)
        return float(residual) / scale


def _check_inputs(spec: ProblemSpec) -> np.ndarray:
    topology = spec.topology
    require_valid(topology, spec.caps)
    get_utility(spec.utility)
    for side, values in (("regular", spec.weights.regular), ("complementary", spec.weights.complementary)):
        arr = np.asarray(values, dtype=float)
        if arr.shape[0] != topology.n_users:
            raise DemandValidationError(f"Expected {topology.n_users} {side} weights, got {arr.shape[0]}")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise DemandValidationError(f"{side} weights must be finite and nonnegative")
    for side, values, size in (
        ("regular", spec.regular_limits, topology.n),
        ("complementary", spec.complementary_limits, topology.n_complementary),
    ):
        if values is None:
            continue
        arr = np.asarray(values, dtype=float)
        if arr.shape[0] != size or np.any(~(arr > 0)):
            raise DemandValidationError(f"{side} limits must hold {size} positive values")
    return spec.caps.as_array()


def _reduce(spec: ProblemSpec, caps: np.ndarray) -> Tuple[Topology, UtilityWeights, np.ndarray, np.ndarray]:
    """Drop users whose cap is zero; every cell must keep a user."""
    keep = caps > 0
    topology = spec.topology
    if keep.all():
        return topology, spec.weights, caps, keep
    reduced = restrict_users(topology, keep)
    empty_regular = sorted(set(range(topology.n)) - set(reduced.regular_index.tolist()))
    empty_comp = sorted(set(range(topology.n_complementary)) - set(reduced.complementary_index.tolist()))
    if empty_regular or empty_comp:
        raise DemandValidationError(
            f"Every user of regular cells {empty_regular} and complementary cells "
            f"{empty_comp} has a zero cap; those cells cannot carry positive demand"
        )
    logger.info("Pruned %d user(s) with zero demand cap", int((~keep).sum()))
    weights = UtilityWeights(
        regular=[w for w, k in zip(spec.weights.regular, keep) if k],
        complementary=[w for w, k in zip(spec.weights.complementary, keep) if k],
    )
    return reduced, weights, caps[keep], keep


def _starts(solver: BarrierSolver, utility: Utility) -> List[np.ndarray]:
    d0 = solver.initial_demands()
    if utility.name != UtilityKind.LIN.value:
        return [d0]
    starts = [d0]
    for seed in range(1, solver.settings.lin_restarts):
        rng = np.random.Generator(np.random.PCG64(seed))
        starts.append(d0 * rng.uniform(_RESTART_LOW, 1.0, size=d0.shape[0]))
    return starts


def solve_q(spec: ProblemSpec) -> SolveReport:
    """
    Maximize the weighted sum utility subject to radius, cap and floor constraints.

    For LOG and DLOG the transformed feasible set is convex and the result is
    the global optimum; for LIN the best of several deterministic starts is
    returned and flagged as possibly local.

    Args:
        spec: Problem inputs including rho and solver settings

    Returns:
        SolveReport: Optimal demands, loads, radii and diagnostics
    """
    caps = _check_inputs(spec)
    topology, weights, kept_caps, keep = _reduce(spec, caps)
    solver = BarrierSolver(spec, topology, weights, kept_caps)
    utility = solver.utility

    starts = _starts(solver, utility)
    best = None
    failures = []
    for index, d0 in enumerate(starts):
        try:
            z, iterations, rounds, converged = solver.run(np.asarray(utility(d0), dtype=float))
        except LoadCoupleError as e:
            logger.debug("Start %d failed: %s", index, e)
            failures.append(str(e))
            continue
        objective = float(solver.weights @ z)
        logger.debug("Start %d reached objective %.12g in %d Newton steps", index, objective, iterations)
        if best is None or objective > best[0] + 1e-12:
            best = (objective, z, iterations, rounds, converged)
    if best is None:
        raise ConvergenceError(f"Solver failed from every start: {failures[0]}")
    _, z, iterations, rounds, converged = best

    n = topology.n
    d = np.asarray(utility.invert(z), dtype=float)
    demands = DemandAllocation.from_arrays(d[:n], d[n:])
    solution = fixed_point_load(topology, demands, settings=spec.solver, raise_on_divergence=False)
    loads = solution.load
    radii = network_radii(topology, demands, spec.solver)
    active = {
        net.name.value: spec.spectral_constraints
        and net.n_cells >= 2
        and solver.bound - radii[net.name.value] <= _ACTIVE_SLACK
        for net in networks_of(topology)
    }
    served = np.zeros(spec.topology.n_users)
    served[keep] = demands.user_totals(topology)
    values = loads.as_array()
    x_max = float(values.max()) if np.all(np.isfinite(values)) else float("inf")

    non_unique = False
    if utility.name == UtilityKind.LOG.value:
        for net in solver.networks:
            k = solver.weights[solver._slice(net)]
            if active[net.name.value] and np.ptp(k) <= 1e-12 * max(1.0, k.max()):
                non_unique = True

    report = SolveReport(
        utility=utility.name,
        rho=spec.rho,
        seed=spec.seed,
        regular_demands=demands.regular,
        complementary_demands=demands.complementary,
        regular_transformed=[float(v) for v in z[:n]],
        complementary_transformed=[float(v) for v in z[n:]],
        loads=loads,
        x_max=x_max,
        sum_utility=sum_utility(topology, weights, demands, utility),
        radii=radii,
        radius_active=active,
        served_demand=served.tolist(),
        total_demand=float(served.sum()),
        mean_user_demand=float(served.mean()) if served.size else 0.0,
        newton_iterations=iterations,
        barrier_rounds=rounds,
        restarts=len(starts),
        converged=converged,
        load_iterations=solution.iterations,
        load_converged=solution.converged,
        kkt_residual=solver.kkt_residual(z),
        possibly_local=utility.name == UtilityKind.LIN.value,
        possibly_non_unique=non_unique,
    )
    logger.info(
        "Solved %s at rho=%.6g: U_sum=%.10g x_max=%.6g (%d Newton steps)",
        report.utility,
        report.rho,
        report.sum_utility,
        report.x_max,
        iterations,
    )
    return report


def load_cap_met(report: SolveReport, settings: SolverSettings) -> bool:
    return report.x_max <= 1.0 - settings.load_epsilon + settings.load_cap_slack


def select_rho(reports: Mapping[float, Optional[SolveReport]], settings: SolverSettings) -> Optional[float]:
    """Largest rho whose report meets the load cap; failed solves are skipped."""
    qualifying = [rho for rho, report in reports.items() if report is not None and load_cap_met(report, settings)]
    return max(qualifying) if qualifying else None


def rho_search(spec: ProblemSpec, step: Optional[float] = None) -> Tuple[float, SolveReport]:
    """
    Largest rho on the grid whose optimal loads stay within the cap.

    Solves at rho = 1 first and returns it unchanged when the cap already
    holds. Otherwise the grid {step, ..., 1 - step} is scanned downwards; the
    maximum load is not monotone in rho, so every point is evaluated until
    the first qualifying one.

    Raises:
        LoadCapError: If no grid point meets the cap
    """
    settings = spec.solver
    step = step or settings.rho_step
    grid = rho_grid(step)
    report = solve_q(spec.with_rho(1.0))
    if load_cap_met(report, settings):
        return 1.0, report
    logger.info("x_max=%.6g at rho=1 exceeds the cap, scanning %d grid points", report.x_max, len(grid))
    for rho in reversed(grid):
        try:
            report = solve_q(spec.with_rho(rho))
        except LoadCoupleError as e:
            logger.warning("Solve at rho=%.6g failed: %s", rho, e)
            continue
        if load_cap_met(report, settings):
            return rho, report
    raise LoadCapError(f"No rho on the grid with step {step} keeps the maximum load within the cap")
