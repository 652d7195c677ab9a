from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple
import math

import pyomo.environ as pyo
from pyomo.contrib.fbbt.fbbt import compute_bounds_on_expr


class SolveStatus(str, Enum):
    OPTIMAL = 'Optimal'
    INFEASIBLE = 'Infeasible'
    TIME_LIMIT = 'TimeLimit'
    ERROR = 'Error'


@dataclass
class SolveOutcome:
    status: SolveStatus
    objective: Optional[float] = None
    bound: Optional[float] = None
    gap: Optional[float] = None
    has_solution: bool = False
    message: str = ''
    wall_s: float = 0.0

    @property
    def optimal(self) -> bool:
        return self.status == SolveStatus.OPTIMAL


@dataclass
class BigMRecord:
    label: str
    slack: object
    big_m: float
    relaxed: object


def bounds_of(expr) -> Tuple[float, float]:
    """Interval bounds of a linear expression from its variable bounds."""
    if isinstance(expr, (int, float)):
        return float(expr), float(expr)
    lb, ub = compute_bounds_on_expr(expr)
    if lb is None or ub is None or not math.isfinite(lb) or not math.isfinite(ub):
        raise ValueError(f"Expression has no finite bounds: {expr}")
    return float(lb), float(ub)


class MilpModel:
    """
    A Pyomo ConcreteModel plus naming and big-M bookkeeping.

    Every continuous variable gets finite bounds so that big-M constants can be
    derived from them.
    """

    def __init__(self, name: str = 'flexindex'):
        self.name = name
        self.model = pyo.ConcreteModel(name=name)
        self.model.rows = pyo.ConstraintList()
        self.big_m_records: List[BigMRecord] = []
        self._counts: Dict[str, int] = {}

    def _unique(self, name: str) -> str:
        count = self._counts.get(name, 0)
        self._counts[name] = count + 1
        return name if count == 0 else f"{name}_{count}"

    def var(self, name: str, lb: float = None, ub: float = None, binary: bool = False):
        if binary:
            v = pyo.Var(within=pyo.Binary)
        else:
            if lb is None or ub is None or not math.isfinite(lb) or not math.isfinite(ub):
                raise ValueError(f"Continuous variable {name} needs finite bounds, got [{lb}, {ub}]")
            if lb > ub:
                raise ValueError(f"Variable {name} has empty domain [{lb}, {ub}]")
            v = pyo.Var(within=pyo.Reals, bounds=(float(lb), float(ub)))
        self.model.add_component(self._unique(name), v)
        return v

    def add(self, expr):
        if isinstance(expr, bool):
            if not expr:
                raise ValueError('Trivially infeasible constraint')
            return None
        return self.model.rows.add(expr)

    def minimize(self, expr):
        self._set_objective(expr, pyo.minimize)

    def maximize(self, expr):
        self._set_objective(expr, pyo.maximize)

    def _set_objective(self, expr, sense):
        if hasattr(self.model, 'objective'):
            self.model.del_component('objective')
        self.model.objective = pyo.Objective(expr=expr, sense=sense)

    def record_big_m(self, label: str, slack, big_m: float, relaxed):
        """Register `slack <= big_m * relaxed` for the truncation check."""
        self.big_m_records.append(BigMRecord(label, slack, float(big_m), relaxed))

    def truncated_big_m(self, tol: float = 1e-4) -> List[str]:
        """Labels of relaxed big-M rows whose slack sits at the big-M boundary."""
        flagged = []
        for rec in self.big_m_records:
            if rec.big_m <= tol:
                continue
            relaxed = pyo.value(rec.relaxed, exception=False)
            slack = pyo.value(rec.slack, exception=False)
            if relaxed is None or slack is None:
                continue
            if relaxed > 0.5 and slack >= rec.big_m * relaxed - tol:
                flagged.append(rec.label)
        return flagged

    def write_lp(self, path: str):
        self.model.write(path, io_options={'symbolic_solver_labels': True})


def value(expr) -> float:
    if isinstance(expr, (int, float)):
        return float(expr)
    return float(pyo.value(expr))
