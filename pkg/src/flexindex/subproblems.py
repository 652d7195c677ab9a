"""
Parametric subproblems at fixed set-points x.

inner_min           min over controls of the overload g at a fixed scenario
worst_case          max over scenarios of min{alpha (delta - h), min_z g}, by
                    alternating an outer relaxation over a control pool with
                    inner_min
evaluate_flexibility_at
                    pessimistic flexibility of x, by restricting the
                    right-hand side of min h s.t. g(z) >= 0 for all controls z
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional
import time

from flexindex.errors import InputError, SolverFailure
from flexindex.formulation import (
    BASE_CONTROL, ControlAssignment, InjectionVariables, RoleAssignment, add_injections, build_grid_block,
)
from flexindex.grid_model import Grid
from flexindex.logger import get_logger
from flexindex.milp_backend import MilpModel, SolveStatus, bounds_of, check_truncation, value
from flexindex.uncertainty_regions import (
    h_box, h_box_expr, h_transfer, h_transfer_expr, scenario_value_at,
)

logger = get_logger('subproblems')


@dataclass
class InnerMinResult:
    g_star: float
    z_star: ControlAssignment
    h: float = 0.0
    value: Optional[float] = None
    flows: Dict[str, float] = field(default_factory=dict)


@dataclass
class WorstCaseOutcome:
    value: float
    upper: float
    y_star: Dict[str, float]
    h_star: float
    inner_pool: List[ControlAssignment] = field(default_factory=list)
    certified: bool = False
    iterations: int = 0

    def feasible(self, tol: float = 1e-6) -> bool:
        """Whether (x, delta) is certified manageable."""
        return self.upper <= tol or (self.certified and self.value <= tol)


@dataclass
class AuxiliaryResult:
    delta_wc_relax: float
    upper: float
    y_witness: Optional[Dict[str, float]] = None
    certified: bool = False
    iterations: int = 0


def _remaining(deadline: Optional[float]) -> Optional[float]:
    if deadline is None:
        return None
    return max(deadline - time.monotonic(), 0.0)


def _expired(deadline: Optional[float], should_stop: Optional[Callable[[], bool]] = None) -> bool:
    if should_stop is not None and should_stop():
        return True
    return deadline is not None and time.monotonic() >= deadline


def region_h(region, grid: Grid, x: Mapping[str, float], y: Mapping[str, float]) -> float:
    if region.kind == 'box':
        return h_box(region, y)
    return h_transfer(region, grid, x, y)


def region_h_expr(model: MilpModel, region, grid: Grid, injections: InjectionVariables, name: str = 'h'):
    if region.kind == 'box':
        return h_box_expr(model, region, injections.y, name=name)
    return h_transfer_expr(model, region, grid, injections, name=name)


def scenario_values(injections: InjectionVariables) -> Dict[str, float]:
    return {n: value(v) for n, v in injections.y.items()}


def inner_min(grid: Grid, region, backend, x: Mapping[str, float], y: Mapping[str, float],
              alpha: Optional[float] = None, delta: Optional[float] = None,
              time_limit: Optional[float] = None) -> InnerMinResult:
    """Best control response to a fixed scenario."""
    model = MilpModel('inner_min')
    injections = add_injections(model, grid, RoleAssignment(x=x, y=y), name='inj')
    grid_vars = build_grid_block(model, grid, injections, control=None, exact=False, name='blk')
    model.minimize(grid_vars.g)
    outcome = backend.solve(model, time_limit=time_limit)
    if outcome.status == SolveStatus.INFEASIBLE:
        raise InputError('Load distribution cannot absorb the scenario at these set-points')
    if not outcome.has_solution:
        raise SolverFailure(f"inner minimization failed: {outcome.status.value} {outcome.message}")
    check_truncation(model)

    result = InnerMinResult(g_star=value(grid_vars.g), z_star=grid_vars.control(),
                            flows={e: value(f) for e, f in grid_vars.flow.items()})
    if alpha is not None and delta is not None:
        result.h = region_h(region, grid, x, y)
        result.value = scenario_value_at(region, alpha, delta, result.h, result.g_star)
    return result


def base_case_violation(grid: Grid, region, backend, x: Mapping[str, float]) -> float:
    """Overload at the forecast with merges open and phase shifters on their law."""
    model = MilpModel('base_case')
    injections = add_injections(model, grid, RoleAssignment(x=x, y=region.y0), name='inj')
    grid_vars = build_grid_block(model, grid, injections, control=BASE_CONTROL, exact=False, name='blk')
    model.minimize(grid_vars.g)
    outcome = backend.solve(model)
    if outcome.status == SolveStatus.INFEASIBLE:
        return float('inf')
    if not outcome.has_solution:
        raise SolverFailure(f"base-case check failed: {outcome.status.value} {outcome.message}")
    return value(grid_vars.g)


class _FalkOuter:
    """Outer relaxation of the max-min problem over a growing control pool."""

    def __init__(self, grid: Grid, region, x: Mapping[str, float], delta: float, alpha: float):
        self.grid = grid
        self.model = MilpModel('worst_case_outer')
        self.injections = add_injections(self.model, grid, RoleAssignment(x=x), y_bounds=region.host_bounds(),
                                         name='inj')
        self.h = region_h_expr(self.model, region, grid, self.injections)
        self.eta = None
        self.terms = [alpha * (delta - self.h)]
        if region.kind == 'transfer':
            self.terms.append(alpha * self.h)
        self.copies = 0

    def add_control(self, control: ControlAssignment):
        self.copies += 1
        grid_vars = build_grid_block(self.model, self.grid, self.injections, control=control, exact=True,
                                     name=f"z{self.copies}")
        if self.eta is None:
            _, g_hi = bounds_of(grid_vars.g)
            self.eta = self.model.var('eta', -1.0, max(g_hi, -1.0))
            terms = self.terms + [self.eta]
            lows = [bounds_of(t)[0] for t in terms]
            highs = [bounds_of(t)[1] for t in terms]
            self.objective = self.model.var('maxmin', min(lows), min(highs))
            for term in terms:
                self.model.add(self.objective <= term)
            self.model.maximize(self.objective)
        self.model.add(self.eta <= grid_vars.g)


def worst_case(grid: Grid, region, backend, config, x: Mapping[str, float], delta: float, alpha: float,
               pool: Optional[List[ControlAssignment]] = None, deadline: Optional[float] = None,
               should_stop: Optional[Callable[[], bool]] = None) -> WorstCaseOutcome:
    """
    Worst-case scenario for (x, delta). Positive value: y_star is unmanageable
    within T(delta). Nonpositive value with certified set: (x, delta) is feasible.
    """
    if pool is None:
        pool = []
    if not pool:
        pool.append(BASE_CONTROL)
    outer = _FalkOuter(grid, region, x, delta, alpha)
    for control in pool:
        outer.add_control(control)

    upper = float('inf')
    best = None
    certified = False
    iterations = 0
    while True:
        if _expired(deadline, should_stop):
            logger.warning('Worst-case search stopped before convergence at delta=%.6g', delta)
            break
        iterations += 1
        outcome = backend.solve(outer.model, time_limit=_remaining(deadline))
        if not outcome.has_solution:
            if outcome.status == SolveStatus.TIME_LIMIT:
                break
            raise SolverFailure(f"worst-case outer problem failed: {outcome.status.value} {outcome.message}")
        check_truncation(outer.model)
        bound = outcome.bound if outcome.bound is not None else outcome.objective
        upper = min(upper, max(bound, outcome.objective))
        y_star = scenario_values(outer.injections)

        inner = inner_min(grid, region, backend, x, y_star, alpha=alpha, delta=delta,
                          time_limit=_remaining(deadline))
        if best is None or inner.value > best.value:
            best = WorstCaseOutcome(value=inner.value, upper=upper, y_star=y_star, h_star=inner.h)
        logger.debug('Falk iteration %d: upper=%.6g lower=%.6g pool=%d', iterations, upper, best.value, len(pool))

        if upper - best.value <= config.wc_tol:
            certified = True
            break
        if inner.z_star in pool:
            logger.debug('Control %s already pooled; outer and inner agree within solver tolerance',
                         inner.z_star.describe())
            certified = True
            break
        pool.append(inner.z_star)
        outer.add_control(inner.z_star)

    if best is None:
        return WorstCaseOutcome(value=float('inf'), upper=upper, y_star={}, h_star=0.0, inner_pool=list(pool),
                                certified=False, iterations=iterations)
    best.upper = upper
    best.inner_pool = list(pool)
    best.certified = certified
    best.iterations = iterations
    return best


def _aux_master(grid: Grid, region, x: Mapping[str, float], pool: List[ControlAssignment], eps: float):
    """min h(x, y) over the host box s.t. g(x, y, z) >= eps for every pooled control."""
    model = MilpModel('auxiliary_master')
    injections = add_injections(model, grid, RoleAssignment(x=x), y_bounds=region.host_bounds(), name='inj')
    h = region_h_expr(model, region, grid, injections)
    if region.kind == 'transfer':
        model.add(h >= 0)
    for k, control in enumerate(pool):
        grid_vars = build_grid_block(model, grid, injections, control=control, exact=True, name=f"z{k + 1}")
        model.add(grid_vars.g >= eps)
    model.minimize(h)
    return model, injections, h


def evaluate_flexibility_at(grid: Grid, region, backend, config, x: Mapping[str, float],
                            alpha: Optional[float] = None, deadline: Optional[float] = None,
                            should_stop: Optional[Callable[[], bool]] = None) -> AuxiliaryResult:
    """
    Pessimistic flexibility of fixed set-points: the smallest h of an
    unmanageable scenario, bracketed from below by a relaxation over a control
    pool and from above by restricted candidates verified with inner_min.
    """
    radius = float(region.host_radius)
    pool = [BASE_CONTROL]
    eps = config.aux_eps0
    lower, upper = 0.0, radius
    witness = None
    iterations = 0
    certified = False

    def solve_master(restriction):
        model, injections, h = _aux_master(grid, region, x, pool, restriction)
        outcome = backend.solve(model, time_limit=_remaining(deadline))
        if outcome.status == SolveStatus.ERROR:
            raise SolverFailure(f"auxiliary master failed: {outcome.message}")
        if not outcome.has_solution:
            return outcome, None, None
        check_truncation(model)
        return outcome, scenario_values(injections), value(h)

    try:
        while not _expired(deadline, should_stop):
            iterations += 1
            outcome, y_lbd, h_lbd = solve_master(0.0)
            if outcome.status == SolveStatus.INFEASIBLE:
                if witness is None:
                    lower = upper = radius
                    logger.debug('No unmanageable scenario in the host set; flexibility = host radius %.6g', radius)
                else:
                    lower = upper
                certified = True
                break
            if y_lbd is None:
                break
            lower = max(lower, min(outcome.bound if outcome.bound is not None else h_lbd, h_lbd))
            inner = inner_min(grid, region, backend, x, y_lbd, time_limit=_remaining(deadline))
            if inner.g_star >= 0:
                if h_lbd < upper:
                    upper, witness = h_lbd, y_lbd
            elif inner.z_star not in pool:
                pool.append(inner.z_star)

            if upper - lower <= config.aux_tol * upper:
                certified = True
                break
            if eps < config.aux_eps_floor:
                logger.warning('Auxiliary restriction reached %.3g with the gap [%.6g, %.6g] still open',
                               eps, lower, upper)
                break

            outcome, y_res, h_res = solve_master(eps)
            if y_res is None:
                if outcome.status == SolveStatus.TIME_LIMIT:
                    break
                eps /= config.r_r
                continue
            inner = inner_min(grid, region, backend, x, y_res, time_limit=_remaining(deadline))
            if inner.g_star >= 0:
                if h_res < upper:
                    upper, witness = h_res, y_res
            else:
                if inner.z_star not in pool:
                    pool.append(inner.z_star)
                eps /= config.r_r
            logger.debug('Auxiliary iteration %d: [%.6g, %.6g] eps=%.3g pool=%d',
                         iterations, lower, upper, eps, len(pool))
            if upper - lower <= config.aux_tol * upper:
                certified = True
                break
    except Exception as e:
        logger.error('Auxiliary evaluation failed: %s', e)
        raise

    lower = min(lower, upper)
    return AuxiliaryResult(delta_wc_relax=lower, upper=upper, y_witness=witness, certified=certified,
                           iterations=iterations)
