from typing import Optional
import time

import pyomo.environ as pyo
from pyomo.opt import SolverStatus, TerminationCondition

from flexindex.errors import BackendUnavailableError
from flexindex.milp_backend.base_backend import BaseBackend
from flexindex.milp_backend.model import MilpModel, SolveOutcome, SolveStatus


class PyomoBackend(BaseBackend):
    """Solves MilpModel instances through a Pyomo SolverFactory plugin."""

    def __init__(self, config):
        super().__init__(config)
        self.solver_name = config.solver
        self._available = None

    def available(self) -> bool:
        if self._available is None:
            try:
                self._available = bool(pyo.SolverFactory(self.solver_name).available(exception_flag=False))
            except Exception as e:
                self.logger.debug('Solver %s availability check failed: %s', self.solver_name, e)
                self._available = False
        return self._available

    def _options(self, mip_gap: float) -> dict:
        cfg = self.config
        name = self.solver_name
        if 'highs' in name:
            return {
                'mip_rel_gap': mip_gap,
                'random_seed': cfg.seed,
                'mip_feasibility_tolerance': cfg.integrality_tol,
                'primal_feasibility_tolerance': cfg.feasibility_tol,
                'threads': cfg.threads,
            }
        if 'gurobi' in name:
            options = {
                'MIPGap': mip_gap,
                'Seed': cfg.seed,
                'FeasibilityTol': cfg.feasibility_tol,
                'IntFeasTol': cfg.integrality_tol,
                'Threads': cfg.threads,
            }
            if cfg.integrality_focus:
                options['IntegralityFocus'] = 1
            return options
        if name == 'cbc':
            return {'ratioGap': mip_gap, 'randomSeed': cfg.seed + 1, 'threads': cfg.threads}
        if name == 'glpk':
            return {'mipgap': mip_gap}
        return {}

    def solve(self, model: MilpModel, time_limit: Optional[float] = None,
              mip_gap: Optional[float] = None) -> SolveOutcome:
        if not self.available():
            raise BackendUnavailableError(f"MILP solver '{self.solver_name}' is not available")
        mip_gap = self.config.mip_gap if mip_gap is None else mip_gap
        if self.config.integrality_focus and 'gurobi' not in self.solver_name:
            self.logger.debug('Integrality focus has no equivalent for %s', self.solver_name)
        self.dump_lp(model)

        start = time.perf_counter()
        try:
            opt = pyo.SolverFactory(self.solver_name)
            for key, val in self._options(mip_gap).items():
                opt.options[key] = val
            kwargs = {'load_solutions': False}
            if time_limit is not None:
                kwargs['timelimit'] = max(float(time_limit), 0.01)
            results = opt.solve(model.model, **kwargs)
        except Exception as e:
            self.logger.error('Solver %s failed on %s: %s', self.solver_name, model.name, e)
            return SolveOutcome(SolveStatus.ERROR, message=str(e), wall_s=time.perf_counter() - start)
        wall = time.perf_counter() - start

        term = results.solver.termination_condition
        has_solution = len(results.solution) > 0
        if term in (TerminationCondition.optimal, TerminationCondition.locallyOptimal):
            status = SolveStatus.OPTIMAL
        elif term in (TerminationCondition.infeasible, TerminationCondition.infeasibleOrUnbounded):
            status = SolveStatus.INFEASIBLE
        elif term in (TerminationCondition.maxTimeLimit, TerminationCondition.maxIterations):
            status = SolveStatus.TIME_LIMIT
        elif results.solver.status == SolverStatus.ok and has_solution:
            status = SolveStatus.OPTIMAL
        else:
            status = SolveStatus.ERROR

        if has_solution and status != SolveStatus.INFEASIBLE:
            model.model.solutions.load_from(results)
        else:
            has_solution = False

        objective = bound = gap = None
        if has_solution:
            objective = pyo.value(model.model.objective)
            sense_max = model.model.objective.sense == pyo.maximize
            raw = results.problem.upper_bound if sense_max else results.problem.lower_bound
            try:
                bound = float(raw)
            except (TypeError, ValueError):
                bound = None
            if bound is None or bound != bound or abs(bound) == float('inf'):
                bound = objective
            gap = abs(bound - objective) / max(abs(objective), 1e-10)

        self.logger.debug('%s: %s obj=%s bound=%s in %.3fs', model.name, status.value, objective, bound, wall)
        return SolveOutcome(status, objective=objective, bound=bound, gap=gap,
                            has_solution=has_solution, message=str(term), wall_s=wall)
