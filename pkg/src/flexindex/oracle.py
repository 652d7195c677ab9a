"""
Brute-force ground truth for tiny grids.

Controls are enumerated exhaustively: every merge choice (including none)
times every phase-shifter regime combination. Each combination is a linear
system in the angles, solved with numpy and accepted only when the regime
assumptions hold at the solution. Nothing here builds a MILP.
"""
from dataclasses import dataclass
from itertools import product
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from flexindex.errors import ConfigError, InfeasibleBaseCase, OracleCapExceeded
from flexindex.grid_model import Grid
from flexindex.logger import get_logger

logger = get_logger('oracle')

RESIDUAL_TOL = 1e-8
REGIME_TOL = 1e-9
MANAGEABLE_TOL = 1e-9


@dataclass(frozen=True)
class OracleConfig:
    x_grid_resolution: float = 0.25
    y_grid_resolution: float = 0.05
    delta_bisect_tol: float = 1e-3
    max_regimes: int = 12
    max_generators: int = 3
    max_combinations: int = 5000

    def __post_init__(self):
        for name in ('x_grid_resolution', 'y_grid_resolution', 'delta_bisect_tol'):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")

    @classmethod
    def from_dict(cls, values: Optional[dict]) -> 'OracleConfig':
        values = values or {}
        known = {k: v for k, v in values.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def check_caps(grid: Grid, cfg: OracleConfig):
    discrete = len(grid.merge_pairs) + len(grid.pst_edges)
    combos = (len(grid.merge_pairs) + 1) * 5 ** len(grid.pst_edges)
    if discrete > cfg.max_regimes or combos > cfg.max_combinations:
        raise OracleCapExceeded(f"{discrete} discrete devices / {combos} control combinations exceed the oracle caps")


def _clamped_offsets(grid: Grid, x: Mapping[str, float], t: float) -> np.ndarray:
    xs = np.array([x[g.id] for g in grid.generators])
    c = np.array([g.contribution for g in grid.generators])
    lo = np.array([g.x_min for g in grid.generators])
    hi = np.array([g.x_max for g in grid.generators])
    return np.minimum(np.maximum(xs + c * t, lo), hi) - xs


def distribution_offsets(grid: Grid, x: Mapping[str, float], y: Mapping[str, float]) -> Optional[Dict[str, float]]:
    """Generator offsets absorbing -sum(y); None when capacity is exceeded."""
    demand = -sum(y.get(n, 0.0) for n in grid.node_ids)
    active = [g for g in grid.generators if g.contribution > 0]
    floor = sum(g.x_min - x[g.id] for g in active)
    ceiling = sum(g.x_max - x[g.id] for g in active)
    if demand < floor - 1e-9 or demand > ceiling + 1e-9:
        return None
    span = max((g.x_max - g.x_min) / g.contribution for g in active) if active else 0.0
    lo, hi = -span, span
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if _clamped_offsets(grid, x, mid).sum() < demand:
            lo = mid
        else:
            hi = mid
    offsets = _clamped_offsets(grid, x, 0.5 * (lo + hi))
    return {g.id: float(d) for g, d in zip(grid.generators, offsets)}


def nodal_injections(grid: Grid, x: Mapping[str, float], y: Mapping[str, float]) -> Optional[np.ndarray]:
    offsets = distribution_offsets(grid, x, y)
    if offsets is None:
        return None
    injection = np.array([n.injection0 + y.get(n.id, 0.0) for n in grid.nodes])
    for g in grid.generators:
        injection[grid.node_index[g.node]] += x[g.id] + offsets[g.id]
    return injection


def _solve_state(grid: Grid, injection: np.ndarray, merge: Optional[str], regimes: Tuple[int, ...]):
    """Flows for one control combination, or None when it is inconsistent."""
    nodes = grid.node_index
    psts = grid.pst_edges
    regulating = [k for k, r in enumerate(regimes) if r in (1, 3)]
    pair = next((b for b in grid.merge_pairs if b.id == merge), None)
    # unknowns: angles, one shift per regulating shifter, the coupler flow
    n_theta = len(grid.nodes)
    n_vars = n_theta + len(regulating) + (1 if pair else 0)
    shift_col = {k: n_theta + i for i, k in enumerate(regulating)}
    fixed_shift = {}
    for k, (edge, r) in enumerate(zip(psts, regimes)):
        if r == 0:
            fixed_shift[edge.id] = edge.pst.shift_min
        elif r == 2:
            fixed_shift[edge.id] = 0.0
        elif r == 4:
            fixed_shift[edge.id] = edge.pst.shift_max
    pst_index = {e.id: k for k, e in enumerate(psts)}

    rows, rhs = [], []
    balance = np.zeros((n_theta, n_vars))
    constant = np.zeros(n_theta)
    for edge in grid.edges:
        a, b, h = nodes[edge.from_node], nodes[edge.to_node], edge.susceptance
        coeff = np.zeros(n_vars)
        coeff[a] += h
        coeff[b] -= h
        k = pst_index.get(edge.id)
        shift_const = 0.0
        if k is not None:
            if k in shift_col:
                coeff[shift_col[k]] += h
            else:
                shift_const = h * fixed_shift[edge.id]
        balance[a] += coeff
        balance[b] -= coeff
        constant[a] += shift_const
        constant[b] -= shift_const
    if pair:
        balance[nodes[pair.node_a], n_vars - 1] += 1.0
        balance[nodes[pair.node_b], n_vars - 1] -= 1.0
    for i in range(n_theta):
        rows.append(balance[i])
        rhs.append(injection[i] - constant[i])

    ref = np.zeros(n_vars)
    ref[nodes[grid.reference_node]] = 1.0
    rows.append(ref)
    rhs.append(0.0)
    if pair:
        row = np.zeros(n_vars)
        row[nodes[pair.node_a]] = 1.0
        row[nodes[pair.node_b]] = -1.0
        rows.append(row)
        rhs.append(0.0)
    for k in regulating:
        edge = psts[k]
        h = edge.susceptance
        row = np.zeros(n_vars)
        row[nodes[edge.from_node]] = h
        row[nodes[edge.to_node]] = -h
        row[shift_col[k]] = h
        rows.append(row)
        rhs.append(edge.pst.threshold if regimes[k] == 1 else -edge.pst.threshold)

    matrix, target = np.array(rows), np.array(rhs)
    # overdetermined when a merge or a regulating shifter pins angles
    solution, *_ = np.linalg.lstsq(matrix, target, rcond=None)
    if np.max(np.abs(matrix @ solution - target)) > RESIDUAL_TOL * max(1.0, np.max(np.abs(target))):
        return None
    theta = solution[:n_theta]

    for k, (edge, r) in enumerate(zip(psts, regimes)):
        pst, h = edge.pst, edge.susceptance
        u = h * (theta[nodes[edge.from_node]] - theta[nodes[edge.to_node]])
        shift = solution[shift_col[k]] if k in shift_col else fixed_shift[edge.id]
        knee_low = pst.threshold - h * pst.shift_min
        knee_high = -pst.threshold - h * pst.shift_max
        intervals = [(knee_low, np.inf), (pst.threshold, knee_low), (-pst.threshold, pst.threshold),
                     (knee_high, -pst.threshold), (-np.inf, knee_high)]
        low, high = intervals[r]
        if not low - REGIME_TOL <= u <= high + REGIME_TOL:
            return None
        if not pst.shift_min - REGIME_TOL <= shift <= pst.shift_max + REGIME_TOL:
            return None

    flows = {}
    for edge in grid.edges:
        shift = 0.0
        k = pst_index.get(edge.id)
        if k is not None:
            shift = solution[shift_col[k]] if k in shift_col else fixed_shift[edge.id]
        flows[edge.id] = edge.susceptance * (theta[nodes[edge.from_node]] - theta[nodes[edge.to_node]] + shift)
    return flows


def violation(grid: Grid, flows: Mapping[str, float]) -> float:
    return max(abs(flows[e.id]) / e.limit - 1 for e in grid.critical_edges)


def oracle_min_violation(grid: Grid, x: Mapping[str, float], y: Mapping[str, float],
                         merges: Optional[List[Optional[str]]] = None,
                         cfg: Optional[OracleConfig] = None) -> Tuple[float, Optional[str]]:
    """Smallest overload over all consistent control combinations and the merge choice attaining it."""
    check_caps(grid, cfg or OracleConfig())
    injection = nodal_injections(grid, x, y)
    if injection is None:
        return float('inf'), None
    if merges is None:
        merges = [None] + [b.id for b in grid.merge_pairs]
    best, choice = float('inf'), None
    for merge in merges:
        for regimes in product(range(5), repeat=len(grid.pst_edges)):
            flows = _solve_state(grid, injection, merge, regimes)
            if flows is None:
                continue
            g = violation(grid, flows)
            if g < best:
                best, choice = g, merge
    return best, choice


def oracle_manageable(grid: Grid, x: Mapping[str, float], y: Mapping[str, float],
                      cfg: Optional[OracleConfig] = None) -> bool:
    """Whether some control keeps every critical edge within its limit."""
    return oracle_min_violation(grid, x, y, cfg=cfg)[0] <= MANAGEABLE_TOL


def _axis(center: float, down: float, up: float, delta: float, step: float) -> List[float]:
    fractions = np.unique(np.concatenate([np.arange(-delta, delta, step), [delta]])) if delta > 0 else [0.0]
    values = {round(center + (s * up if s > 0 else s * down), 12) for s in fractions}
    return sorted(values)


class _Manageability:
    """Memoized oracle_manageable at fixed x."""

    def __init__(self, grid: Grid, x: Mapping[str, float], cfg: OracleConfig):
        self.grid, self.x, self.cfg = grid, x, cfg
        self.cache: Dict[tuple, bool] = {}

    def __call__(self, y: Mapping[str, float]) -> bool:
        key = tuple(round(y.get(n, 0.0), 10) for n in self.grid.node_ids)
        if key not in self.cache:
            self.cache[key] = oracle_manageable(self.grid, self.x, y, self.cfg)
        return self.cache[key]


def _box_points(grid: Grid, region, delta: float, step: float):
    axes = [_axis(region.y0.get(n, 0.0), region.delta_minus.get(n, 0.0), region.delta_plus.get(n, 0.0), delta, step)
            for n in grid.node_ids]
    for values in product(*axes):
        yield dict(zip(grid.node_ids, values))


def _box_manageable(grid: Grid, region, delta: float, step: float, manageable: _Manageability) -> bool:
    return all(manageable(y) for y in _box_points(grid, region, delta, step))


def transfer_value(grid: Grid, region, x: Mapping[str, float], y: Mapping[str, float]) -> Optional[float]:
    offsets = distribution_offsets(grid, x, y)
    if offsets is None:
        return None
    side_a = sum(y.get(n, 0.0) for n in region.region_a) + \
        sum(offsets[g.id] for g in grid.generators if g.node in region.region_a)
    side_b = -sum(y.get(n, 0.0) for n in region.region_b) - \
        sum(offsets[g.id] for g in grid.generators if g.node in region.region_b)
    return min(side_a, side_b)


def _transfer_flexibility(grid: Grid, region, x: Mapping[str, float], cfg: OracleConfig) -> float:
    axes = []
    for n in grid.node_ids:
        lo, hi = region.y_lo.get(n, 0.0), region.y_hi.get(n, 0.0)
        if hi - lo <= 1e-12:
            axes.append([lo])
        else:
            axes.append(sorted(set(np.arange(lo, hi, cfg.y_grid_resolution * (hi - lo)).tolist() + [hi])))
    manageable = _Manageability(grid, x, cfg)
    reach, worst = 0.0, float('inf')
    for values in product(*axes):
        y = dict(zip(grid.node_ids, values))
        h = transfer_value(grid, region, x, y)
        if h is None:
            continue
        reach = max(reach, h)
        if h > MANAGEABLE_TOL and h < worst and not manageable(y):
            worst = h
    host = region.host_radius if region.host_radius is not None else reach
    return float(min(worst, host))


def oracle_flexibility_at(grid: Grid, region, x: Mapping[str, float], cfg: Optional[OracleConfig] = None) -> float:
    """Largest delta whose gridded T(delta) is entirely manageable at x, by bisection."""
    cfg = cfg or OracleConfig()
    check_caps(grid, cfg)
    if region.kind == 'transfer':
        return _transfer_flexibility(grid, region, x, cfg)

    host = float(region.host_radius)
    step = max(cfg.y_grid_resolution * host, 1e-9)
    manageable = _Manageability(grid, x, cfg)
    if not manageable(dict(region.y0)):
        return 0.0
    if _box_manageable(grid, region, host, step, manageable):
        return host
    lo, hi = 0.0, host
    while hi - lo > cfg.delta_bisect_tol:
        mid = 0.5 * (lo + hi)
        if _box_manageable(grid, region, mid, step, manageable):
            lo = mid
        else:
            hi = mid
    return lo


def oracle_slack(region, cfg: Optional[OracleConfig] = None) -> float:
    """Resolution of the oracle value."""
    cfg = cfg or OracleConfig()
    if region.kind == 'transfer':
        lo, hi = region.host_bounds()
        span = max([hi.get(n, 0.0) - lo.get(n, 0.0) for n in set(lo) | set(hi)] + [0.0])
        return cfg.y_grid_resolution * span + cfg.delta_bisect_tol
    host = region.host_radius or 0.0
    return cfg.y_grid_resolution * host + cfg.delta_bisect_tol


def _x_grid(grid: Grid, cfg: OracleConfig):
    free = grid.generators[:-1]
    last = grid.generators[-1]
    axes = [sorted(set(np.arange(g.x_min, g.x_max, cfg.x_grid_resolution).tolist() + [g.x_max])) for g in free]
    for values in product(*axes):
        x = dict(zip((g.id for g in free), values))
        x[last.id] = -grid.total_injection0 - sum(values)
        if last.x_min - 1e-9 <= x[last.id] <= last.x_max + 1e-9:
            yield x


def oracle_best(grid: Grid, region, cfg: Optional[OracleConfig] = None) -> Tuple[float, Dict[str, float]]:
    """Best gridded set-points and their oracle flexibility."""
    cfg = cfg or OracleConfig()
    check_caps(grid, cfg)
    if len(grid.generators) > cfg.max_generators:
        raise OracleCapExceeded(f"{len(grid.generators)} generators exceed the oracle cap of {cfg.max_generators}")
    best, best_x = -1.0, None
    host = region.host_radius or 0.0
    step = max(cfg.y_grid_resolution * host, 1e-9)
    for x in _x_grid(grid, cfg):
        base, _ = oracle_min_violation(grid, x, dict(region.y0), merges=[None], cfg=cfg)
        if base > MANAGEABLE_TOL:
            continue
        if region.kind == 'box' and best > 0:
            if not _box_manageable(grid, region, best, step, _Manageability(grid, x, cfg)):
                continue
        value = oracle_flexibility_at(grid, region, x, cfg)
        if value > best:
            best, best_x = value, x
    if best_x is None:
        raise InfeasibleBaseCase('no gridded set-point satisfies the base case')
    logger.debug('Oracle flexibility %.6g at %s', best, best_x)
    return best, best_x


def oracle_flexibility(grid: Grid, region, cfg: Optional[OracleConfig] = None) -> float:
    return oracle_best(grid, region, cfg)[0]
