"""
Adaptive discretization for the maximal flexibility index.

Two procedures share a pool of worst-case scenarios and a bound store:

  lower bounding   solves the discretized problem without restriction; its
                   value is an optimistic (over-)estimate of the flexibility
  upper bounding   solves it with a restriction eps_R > 0 so that candidates
                   are robustly feasible; certified candidates raise the
                   guaranteed value

Auxiliary evaluations of newly found set-points may raise the guaranteed value
as well. Bounds are reported in flexibility space; the objective is -delta, so
-delta_optimistic is the objective lower bound and -delta_guaranteed the
objective upper bound.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Mapping, Optional
import json
import os
import threading
import time

from flexindex.errors import BackendUnavailableError, InfeasibleBaseCase, SolverFailure
from flexindex.formulation import (
    BASE_CONTROL, ControlAssignment, RoleAssignment, add_injections, add_set_points, build_grid_block,
)
from flexindex.grid_model import Grid
from flexindex.logger import get_logger
from flexindex.milp_backend import MilpModel, SolveStatus, check_truncation, create_backend, encode_min2, value
from flexindex.params import Config
from flexindex.subproblems import evaluate_flexibility_at, region_h, worst_case
from flexindex.uncertainty_regions import (
    AlphaScaling, compute_delta_norm, h_transfer_expr, scenario_constraint, transfer_host_radius,
)

logger = get_logger('esip_solver')

FEAS_TOL = 1e-6
ABS_GAP = 1e-4
SMALL_OPTIMISTIC = 1e-3
DUPLICATE_TOL = 1e-9


@dataclass
class ScenarioEntry:
    y: Dict[str, float]
    h: float
    origin: str
    iteration: int
    dropped: bool = False


class DiscretizationPool:
    """Worst-case scenarios driving the upper-level problem."""

    def __init__(self):
        self.entries: List[ScenarioEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, y: Mapping[str, float], h: float, origin: str, iteration: int) -> bool:
        """Append a scenario unless an identical one is already pooled."""
        for entry in self.entries:
            keys = set(entry.y) | set(y)
            if max(abs(entry.y.get(k, 0.0) - y.get(k, 0.0)) for k in keys) <= DUPLICATE_TOL:
                return False
        self.entries.append(ScenarioEntry(dict(y), float(h), origin, iteration))
        return True

    def active(self) -> List[ScenarioEntry]:
        return [e for e in self.entries if not e.dropped]

    @property
    def active_count(self) -> int:
        return sum(1 for e in self.entries if not e.dropped)


def drop_redundant(pool: DiscretizationPool, delta_optimistic: float, region_kind: str = 'box') -> int:
    """
    Mark scenarios outside T(delta_optimistic) as dropped; they cannot bind
    while delta stays below their h. Scenarios return when the bound grows past
    their h again. Only valid when h does not depend on x.
    """
    if region_kind != 'box':
        logger.warning('Scenario dropping needs an x-independent region function; skipped for %s', region_kind)
        return 0
    dropped = 0
    for entry in pool.entries:
        redundant = entry.h > delta_optimistic + DUPLICATE_TOL
        if redundant and not entry.dropped:
            dropped += 1
        entry.dropped = redundant
    if dropped:
        logger.debug('Dropped %d scenarios above delta_optimistic=%.6g', dropped, delta_optimistic)
    return dropped


@dataclass
class BoundState:
    delta_optimistic: float
    delta_guaranteed: float = 0.0
    incumbent_x: Optional[Dict[str, float]] = None
    guaranteed_source: str = ''
    lower_iterations: int = 0
    upper_iterations: int = 0
    eps_r: float = 0.05
    upper_failures: int = 0


@dataclass
class IterationRecord:
    procedure: str
    iter: int
    eps_r: float
    delta_candidate: Optional[float]
    wc_value: Optional[float]
    pool_size: int
    wall_ms: float
    delta_optimistic: float
    delta_guaranteed: float
    objective_lower_bound: float
    objective_upper_bound: float
    note: str = ''

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FlexibilityResult:
    delta_guaranteed: float
    delta_optimistic: float
    x: Optional[Dict[str, float]]
    certified: bool
    status: str
    region: str
    alpha: float
    lower_iterations: int
    upper_iterations: int
    wall_s: float
    iterations: List[IterationRecord] = field(default_factory=list)
    pool_size: int = 0

    @property
    def gap(self) -> float:
        return self.delta_optimistic - self.delta_guaranteed

    def to_dict(self) -> dict:
        return {
            'delta_guaranteed': self.delta_guaranteed,
            'delta_optimistic': self.delta_optimistic,
            'objective_lower_bound': -self.delta_optimistic,
            'objective_upper_bound': -self.delta_guaranteed,
            'gap': self.gap,
            'x': self.x,
            'certified': self.certified,
            'status': self.status,
            'region': self.region,
            'alpha': self.alpha,
            'lower_iterations': self.lower_iterations,
            'upper_iterations': self.upper_iterations,
            'pool_size': self.pool_size,
            'wall_s': self.wall_s,
        }


def gap_closed(delta_optimistic: float, delta_guaranteed: float, rel_tol: float) -> bool:
    gap = delta_optimistic - delta_guaranteed
    if delta_optimistic < SMALL_OPTIMISTIC:
        return gap <= ABS_GAP
    return gap <= rel_tol * delta_optimistic


class BoundStore:
    """Synchronized bounds and pool shared by the procedures."""

    def __init__(self, delta_optimistic: float, eps_r: float, log_path: Optional[str] = None):
        self.lock = threading.Lock()
        self.state = BoundState(delta_optimistic=float(delta_optimistic), eps_r=float(eps_r))
        self.pool = DiscretizationPool()
        self.records: List[IterationRecord] = []
        self.done = threading.Event()
        self.log_path = log_path
        if log_path:
            os.makedirs(os.path.dirname(log_path) or '.', exist_ok=True)
            open(log_path, 'w').close()

    def update_optimistic(self, delta: float) -> bool:
        with self.lock:
            state = self.state
            if delta >= state.delta_optimistic:
                return False
            if delta < state.delta_guaranteed - FEAS_TOL:
                logger.warning('Optimistic value %.6g fell below the guaranteed %.6g; clipped',
                               delta, state.delta_guaranteed)
                delta = state.delta_guaranteed
            state.delta_optimistic = float(delta)
            logger.info('delta_optimistic -> %.6g (objective lower bound %.6g)', delta, -delta)
            return True

    def update_guaranteed(self, delta: float, x: Mapping[str, float], source: str) -> bool:
        with self.lock:
            state = self.state
            if delta > state.delta_optimistic + FEAS_TOL:
                logger.warning('Guaranteed value %.6g from %s exceeds the optimistic %.6g; clipped',
                               delta, source, state.delta_optimistic)
                delta = state.delta_optimistic
            if state.incumbent_x is not None and delta <= state.delta_guaranteed:
                return False
            state.delta_guaranteed = float(max(delta, state.delta_guaranteed))
            state.incumbent_x = dict(x)
            state.guaranteed_source = source
            logger.info('delta_guaranteed -> %.6g from %s (objective upper bound %.6g)', delta, source, -delta)
            return True

    def add_scenario(self, y: Mapping[str, float], h: float, origin: str, iteration: int) -> bool:
        with self.lock:
            return self.pool.add(y, h, origin, iteration)

    def active_scenarios(self, keep_transformed: bool = False) -> List[ScenarioEntry]:
        with self.lock:
            entries = self.pool.entries if keep_transformed else self.pool.active()
            return list(entries)

    def drop(self, region_kind: str) -> int:
        with self.lock:
            return drop_redundant(self.pool, self.state.delta_optimistic, region_kind)

    def converged(self, rel_tol: float) -> bool:
        with self.lock:
            if self.state.incumbent_x is None:
                return False
            return gap_closed(self.state.delta_optimistic, self.state.delta_guaranteed, rel_tol)

    def snapshot(self) -> BoundState:
        with self.lock:
            return BoundState(**asdict(self.state))

    def record(self, procedure: str, iteration: int, eps_r: float, delta_candidate, wc_value,
               started: float, note: str = '') -> IterationRecord:
        with self.lock:
            state = self.state
            rec = IterationRecord(
                procedure=procedure,
                iter=iteration,
                eps_r=eps_r,
                delta_candidate=delta_candidate,
                wc_value=wc_value,
                pool_size=len(self.pool),
                wall_ms=round((time.perf_counter() - started) * 1000.0, 3),
                delta_optimistic=state.delta_optimistic,
                delta_guaranteed=state.delta_guaranteed,
                objective_lower_bound=-state.delta_optimistic,
                objective_upper_bound=-state.delta_guaranteed,
                note=note,
            )
            self.records.append(rec)
            if self.log_path:
                with open(self.log_path, 'a') as file:
                    file.write(json.dumps(rec.to_dict()) + '\n')
        logger.info('[%s %d] eps_r=%.3g candidate=%s wc=%s bounds=[%.6g, %.6g] pool=%d %s',
                    procedure, iteration, eps_r, delta_candidate, wc_value,
                    rec.delta_guaranteed, rec.delta_optimistic, rec.pool_size, note)
        return rec


@dataclass
class UpperLevelCandidate:
    delta: float
    x: Dict[str, float]
    controls: List[ControlAssignment]


def _x_key(x: Mapping[str, float]) -> tuple:
    return tuple(sorted((k, round(v, 6)) for k, v in x.items()))


class FlexibilitySolver:
    """Runs the two bounding procedures and the auxiliary evaluations."""

    def __init__(self, grid: Grid, region, config: Config, backend=None, log_path: Optional[str] = None):
        self.grid = grid
        self.config = config
        self._owner = threading.get_ident()
        self._main_backend = backend or create_backend(config)
        self._local = threading.local()
        if not self.backend.available():
            raise BackendUnavailableError(f"MILP solver '{config.solver}' is not available")
        if region.kind == 'transfer' and region.host_radius is None:
            region = replace(region, host_radius=transfer_host_radius(grid, region, self.backend, config))
            logger.debug('Transfer host radius %.6g', region.host_radius)
        self.region = region
        self.scaling = AlphaScaling(config.alpha_prime, compute_delta_norm(grid, region, self.backend, config))
        self.alpha = self.scaling.alpha
        self.transform = config.use_transformation and region.kind == 'box'
        if config.use_transformation and region.kind != 'box':
            logger.warning('Transformation needs the hyperbox region; disabled for %s', region.kind)
        self.dropping = config.use_dropping and region.kind == 'box'
        if config.use_dropping and region.kind != 'box':
            logger.warning('Scenario dropping needs the hyperbox region; disabled for %s', region.kind)

        self.store = BoundStore(region.host_radius, config.eps_r0, log_path)
        self.started = time.monotonic()
        self.deadline = self.started + config.time_limit
        self.status = 'running'
        self._executor = None
        self._aux_seen = set()
        self._aux_lock = threading.Lock()
        self._aux_futures = []

    @property
    def backend(self):
        """MILP backend of the calling thread; worker threads build their own."""
        if threading.get_ident() == self._owner:
            return self._main_backend
        backend = getattr(self._local, 'backend', None)
        if backend is None:
            backend = self._local.backend = create_backend(self.config)
            logger.debug('Backend created for worker thread %s', threading.current_thread().name)
        return backend

    def _expired(self) -> bool:
        return self.store.done.is_set() or time.monotonic() >= self.deadline

    def _remaining(self) -> float:
        return max(self.deadline - time.monotonic(), 0.0)

    def upper_level(self, eps_r: float, scenarios: Optional[List[ScenarioEntry]] = None) -> Optional[UpperLevelCandidate]:
        """
        Discretized problem: max delta over set-points with one control copy
        per pooled scenario, restricted by eps_r. Returns None when infeasible.
        """
        grid, region, alpha = self.grid, self.region, self.alpha
        if scenarios is None:
            scenarios = self.store.active_scenarios(self.config.keep_transformed)
        snapshot = self.store.snapshot()
        model = MilpModel('upper_level')
        x = add_set_points(model, grid, name='x')
        delta = model.var('delta', 0.0, max(min(region.host_radius, snapshot.delta_optimistic), 0.0))

        base = add_injections(model, grid, RoleAssignment(x=x, y=region.y0), name='base')
        base_vars = build_grid_block(model, grid, base, control=BASE_CONTROL, exact=False, name='base')
        model.add(base_vars.g <= -eps_r)

        blocks = []
        for d, entry in enumerate(scenarios):
            name = f"d{d + 1}"
            if self.transform:
                if entry.h <= DUPLICATE_TOL:
                    continue
                step = encode_min2(model, entry.h, delta, name=f"{name}_step")
                y = {n: region.y0.get(n, 0.0) + (entry.y.get(n, 0.0) - region.y0.get(n, 0.0)) / entry.h * step
                     for n in grid.node_ids}
                injections = add_injections(model, grid, RoleAssignment(x=x, y=y), name=name)
                grid_vars = build_grid_block(model, grid, injections, control=None, exact=False, name=name)
                model.add(grid_vars.g <= -eps_r)
            else:
                injections = add_injections(model, grid, RoleAssignment(x=x, y=entry.y), name=name)
                grid_vars = build_grid_block(model, grid, injections, control=None, exact=False, name=name)
                if region.kind == 'box':
                    h = entry.h
                else:
                    h = h_transfer_expr(model, region, grid, injections, name=f"{name}_h")
                scenario_constraint(model, region, alpha, delta, h, grid_vars.g, rhs=-eps_r, name=f"{name}_scen")
            blocks.append(grid_vars)

        model.maximize(delta)
        outcome = self.backend.solve(model, time_limit=self._remaining())
        if outcome.status == SolveStatus.INFEASIBLE:
            return None
        if not outcome.has_solution:
            if outcome.status == SolveStatus.TIME_LIMIT:
                raise TimeoutError('upper-level problem hit the time limit')
            raise SolverFailure(f"upper-level problem failed: {outcome.status.value} {outcome.message}")
        check_truncation(model)
        # optimistic value from the dual bound, capped at the upper bound of delta
        delta_value = value(delta)
        if outcome.bound is not None:
            delta_value = max(delta_value, min(outcome.bound, delta.ub))
        return UpperLevelCandidate(
            delta=delta_value,
            x={g: value(v) for g, v in x.items()},
            controls=[b.control() for b in blocks],
        )

    def _certify(self, candidate: UpperLevelCandidate, delta: float):
        return worst_case(self.grid, self.region, self.backend, self.config, candidate.x, delta, self.alpha,
                          deadline=self.deadline, should_stop=self.store.done.is_set)

    def _add_scenario(self, wc, candidate: UpperLevelCandidate, origin: str, iteration: int) -> bool:
        if not wc.y_star:
            return False
        h = wc.h_star if self.region.kind != 'box' else region_h(self.region, self.grid, candidate.x, wc.y_star)
        return self.store.add_scenario(wc.y_star, h, origin, iteration)

    def lower_bounding_step(self) -> Optional[IterationRecord]:
        started = time.perf_counter()
        with self.store.lock:
            self.store.state.lower_iterations += 1
            iteration = self.store.state.lower_iterations
        candidate = self.upper_level(0.0)
        if candidate is None:
            logger.error('Upper-level problem without restriction is infeasible')
            raise InfeasibleBaseCase('no feasible preventive action satisfies the base case')
        self.store.update_optimistic(candidate.delta)
        if self.store.snapshot().incumbent_x is None:
            self.store.update_guaranteed(0.0, candidate.x, 'base case')
        if self.config.use_auxiliary:
            self.auxiliary_dispatch(candidate.x)

        wc = self._certify(candidate, candidate.delta)
        note = ''
        if wc.feasible(FEAS_TOL):
            self.store.update_guaranteed(candidate.delta, candidate.x, 'lower bounding')
            note = 'certified'
        elif wc.value > FEAS_TOL:
            note = 'scenario added' if self._add_scenario(wc, candidate, 'lower', iteration) else 'duplicate scenario'
        else:
            note = 'uncertified'
        if self.dropping:
            self.store.drop(self.region.kind)
        return self.store.record('lower', iteration, 0.0, candidate.delta, wc.value, started, note)

    def upper_bounding_step(self) -> Optional[IterationRecord]:
        started = time.perf_counter()
        with self.store.lock:
            self.store.state.upper_iterations += 1
            iteration = self.store.state.upper_iterations
            eps_r = self.store.state.eps_r
        candidate = self.upper_level(eps_r)
        if candidate is None:
            with self.store.lock:
                self.store.state.eps_r = eps_r / self.config.r_r
                self.store.state.upper_failures = 0
            return self.store.record('upper', iteration, eps_r, None, None, started, 'infeasible, restriction reduced')

        wc = self._certify(candidate, candidate.delta)
        if wc.feasible(FEAS_TOL):
            self.store.update_guaranteed(candidate.delta, candidate.x, 'upper bounding')
            with self.store.lock:
                self.store.state.upper_failures = 0
            note = 'certified'
        else:
            note = 'scenario added' if wc.value > FEAS_TOL and self._add_scenario(wc, candidate, 'upper', iteration) \
                else 'not certified'
            with self.store.lock:
                self.store.state.upper_failures += 1
                if self.store.state.upper_failures >= 2:
                    self.store.state.eps_r = eps_r / self.config.r_r
                    self.store.state.upper_failures = 0
                    note += ', restriction reduced'
        if self.config.use_auxiliary:
            self.auxiliary_dispatch(candidate.x)
        return self.store.record('upper', iteration, eps_r, candidate.delta, wc.value, started, note)

    def auxiliary_dispatch(self, x_new: Mapping[str, float]):
        """Evaluate the flexibility of new set-points, in the background unless single-threaded."""
        key = _x_key(x_new)
        with self._aux_lock:
            if key in self._aux_seen:
                return
            self._aux_seen.add(key)
        if self._executor is None:
            self._run_auxiliary(dict(x_new))
        else:
            self._aux_futures.append(self._executor.submit(self._run_auxiliary, dict(x_new)))

    def _run_auxiliary(self, x: Dict[str, float]):
        if self._expired():
            return
        started = time.perf_counter()
        try:
            result = evaluate_flexibility_at(self.grid, self.region, self.backend, self.config, x, self.alpha,
                                             deadline=self.deadline, should_stop=self.store.done.is_set)
        except Exception as e:
            logger.warning('Auxiliary evaluation abandoned: %s', e)
            return
        improved = self.store.update_guaranteed(result.delta_wc_relax, x, 'auxiliary')
        self.store.record('auxiliary', result.iterations, 0.0, result.delta_wc_relax, None, started,
                          'improved guaranteed' if improved else 'no improvement')

    def _finished(self) -> bool:
        if self.store.converged(self.config.rel_tol):
            self.status = 'certified'
        elif time.monotonic() >= self.deadline:
            self.status = 'time_limit'
        else:
            state = self.store.snapshot()
            if state.lower_iterations + state.upper_iterations >= 2 * self.config.max_iterations:
                self.status = 'max_iterations'
            else:
                return False
        self.store.done.set()
        return True

    def _worker(self, step):
        try:
            while not self._finished() and not self.store.done.is_set():
                step()
        except TimeoutError:
            self._finished()
        except Exception:
            self.store.done.set()
            raise

    def solve(self) -> FlexibilityResult:
        logger.info('Solving flexibility: region=%s alpha=%.6g host=%.6g transformation=%s dropping=%s '
                    'auxiliary=%s single_thread=%s', self.region.kind, self.alpha, self.region.host_radius,
                    self.transform, self.dropping, self.config.use_auxiliary, self.config.single_thread)
        try:
            if self.config.single_thread:
                try:
                    while not self._finished():
                        self.lower_bounding_step()
                        if self._finished():
                            break
                        self.upper_bounding_step()
                except TimeoutError:
                    self._finished()
            else:
                with ThreadPoolExecutor(max_workers=3) as executor:
                    self._executor = executor
                    workers = [executor.submit(self._worker, self.lower_bounding_step),
                               executor.submit(self._worker, self.upper_bounding_step)]
                    for future in workers:
                        future.result()
                    self.store.done.set()
                self._executor = None
        except Exception as e:
            logger.error('Flexibility solve failed: %s', e)
            raise
        return self.result()

    def result(self) -> FlexibilityResult:
        state = self.store.snapshot()
        certified = self.status == 'certified'
        if not certified:
            logger.warning('Flexibility run ended uncertified (%s): [%.6g, %.6g]', self.status,
                           state.delta_guaranteed, state.delta_optimistic)
        return FlexibilityResult(
            delta_guaranteed=state.delta_guaranteed,
            delta_optimistic=state.delta_optimistic,
            x=state.incumbent_x,
            certified=certified,
            status=self.status,
            region=self.region.kind,
            alpha=self.alpha,
            lower_iterations=state.lower_iterations,
            upper_iterations=state.upper_iterations,
            wall_s=time.monotonic() - self.started,
            iterations=list(self.store.records),
            pool_size=len(self.store.pool),
        )


def solve_flexibility(grid: Grid, region, config: Config, backend=None,
                      log_path: Optional[str] = None) -> FlexibilityResult:
    """Certified interval [delta_guaranteed, delta_optimistic] of the maximal flexibility index."""
    solver = FlexibilitySolver(grid, region, config, backend=backend, log_path=log_path)
    result = solver.solve()
    logger.info('Flexibility in [%.6g, %.6g] (objective bounds [%.6g, %.6g]) status=%s',
                result.delta_guaranteed, result.delta_optimistic,
                -result.delta_optimistic, -result.delta_guaranteed, result.status)
    return result
