"""
Parametrized uncertainty sets T(delta) = {y in host box : h(x, y) <= delta}.

Two parametrizations are supported: the scaled hyperbox around a forecast y0
and the net power transfer from region A to region B.
"""
from dataclasses import dataclass, field, replace
from typing import Dict, Mapping, Optional, Tuple
import math

from flexindex.errors import CaseFileError, ConfigError, InputError
from flexindex.formulation import RoleAssignment, add_injections, build_grid_block, InjectionVariables
from flexindex.grid_model import Grid, redistribute, uniqueness_bound
from flexindex.logger import get_logger
from flexindex.milp_backend import MilpModel, encode_max, encode_min, value

logger = get_logger('uncertainty_regions')

PIN_TOL = 1e-12


@dataclass(frozen=True)
class HyperboxRegion:
    y0: Mapping[str, float]
    delta_minus: Mapping[str, float]
    delta_plus: Mapping[str, float]
    host_radius: float

    kind = 'box'

    def __post_init__(self):
        for name, vec in (('delta_minus', self.delta_minus), ('delta_plus', self.delta_plus)):
            negative = [n for n, v in vec.items() if v < 0]
            if negative:
                raise InputError(f"{name} must be non-negative, violated at {negative}")
        if self.host_radius < 0:
            raise InputError(f"host_radius must be non-negative, got {self.host_radius}")

    def bounds(self, delta: float) -> Tuple[Dict[str, float], Dict[str, float]]:
        """Corners of T(delta)."""
        nodes = set(self.y0) | set(self.delta_minus) | set(self.delta_plus)
        lo = {n: self.y0.get(n, 0.0) - self.delta_minus.get(n, 0.0) * delta for n in nodes}
        hi = {n: self.y0.get(n, 0.0) + self.delta_plus.get(n, 0.0) * delta for n in nodes}
        return lo, hi

    def host_bounds(self) -> Tuple[Dict[str, float], Dict[str, float]]:
        return self.bounds(self.host_radius)

    def contains(self, y: Mapping[str, float], delta: float, tol: float = 1e-9) -> bool:
        lo, hi = self.bounds(delta)
        return all(lo[n] - tol <= y.get(n, 0.0) <= hi[n] + tol for n in lo)


@dataclass(frozen=True)
class TransferRegion:
    region_a: Tuple[str, ...]
    region_b: Tuple[str, ...]
    y_lo: Mapping[str, float]
    y_hi: Mapping[str, float]
    y0: Mapping[str, float] = field(default_factory=dict)
    host_radius: Optional[float] = None

    kind = 'transfer'

    def __post_init__(self):
        overlap = set(self.region_a) & set(self.region_b)
        if overlap:
            raise InputError(f"Transfer regions overlap at {sorted(overlap)}")
        for n in set(self.y_lo) | set(self.y_hi):
            lo, hi = self.y_lo.get(n, 0.0), self.y_hi.get(n, 0.0)
            if lo > hi:
                raise InputError(f"Empty host interval at node {n}: [{lo}, {hi}]")
            if not lo - 1e-9 <= self.y0.get(n, 0.0) <= hi + 1e-9:
                raise InputError(f"Host box does not contain the forecast at node {n}")

    def host_bounds(self) -> Tuple[Dict[str, float], Dict[str, float]]:
        return dict(self.y_lo), dict(self.y_hi)


@dataclass(frozen=True)
class AlphaScaling:
    alpha_prime: float
    delta_norm: float = 1.0

    def __post_init__(self):
        if not self.alpha_prime > 0 or not self.delta_norm > 0:
            raise ConfigError(f"alpha needs positive alpha_prime and delta_norm, got {self.alpha_prime}, {self.delta_norm}")

    @property
    def alpha(self) -> float:
        return self.alpha_prime / self.delta_norm


def h_box(region: HyperboxRegion, y: Mapping[str, float]) -> float:
    """Smallest delta with y in T(delta); inf when a pinned coordinate moved."""
    worst = 0.0
    for n, y0 in region.y0.items():
        d = y.get(n, 0.0) - y0
        if d > PIN_TOL:
            scale = region.delta_plus.get(n, 0.0)
        elif d < -PIN_TOL:
            scale = region.delta_minus.get(n, 0.0)
        else:
            continue
        if scale <= 0:
            return math.inf
        worst = max(worst, abs(d) / scale)
    for n in set(y) - set(region.y0):
        if abs(y[n]) > PIN_TOL:
            return math.inf
    return worst


def h_box_expr(model: MilpModel, region: HyperboxRegion, y: Mapping[str, object], exact: bool = False,
               name: str = 'hbox'):
    """h of the hyperbox for decision offsets; epigraph form unless exact."""
    terms = [0.0]
    for n, y0 in region.y0.items():
        yn = y.get(n, 0.0)
        if isinstance(yn, (int, float)):
            fixed = h_box(region, {**region.y0, n: yn})
            if math.isinf(fixed):
                raise InputError(f"Offset at node {n} leaves the hyperbox")
            terms.append(fixed)
            continue
        if region.delta_plus.get(n, 0.0) > 0:
            terms.append((yn - y0) / region.delta_plus[n])
        if region.delta_minus.get(n, 0.0) > 0:
            terms.append((y0 - yn) / region.delta_minus[n])
    if exact:
        return encode_max(model, terms, name=name)
    h = model.var(name, 0.0, max(region.host_radius, max(t for t in terms if isinstance(t, float))))
    for term in terms:
        model.add(h >= term)
    return h


def _transfer_sides(region: TransferRegion, grid: Grid, y: Mapping[str, object], dz: Mapping[str, object]):
    side_a = sum(y[n] for n in region.region_a) + sum(dz[g.id] for g in grid.generators if g.node in region.region_a)
    side_b = -sum(y[n] for n in region.region_b) - sum(dz[g.id] for g in grid.generators if g.node in region.region_b)
    return side_a, side_b


def h_transfer(region: TransferRegion, grid: Grid, x: Mapping[str, float], y: Mapping[str, float]) -> float:
    """Net transfer: min of the extra injection in A and the injection decrease in B."""
    _, dz = redistribute(grid, x, -sum(y.get(n, 0.0) for n in grid.node_ids))
    side_a, side_b = _transfer_sides(region, grid, {n: y.get(n, 0.0) for n in grid.node_ids}, dz)
    return float(min(side_a, side_b))


def h_transfer_expr(model: MilpModel, region: TransferRegion, grid: Grid, injections: InjectionVariables,
                    name: str = 'htransfer'):
    side_a, side_b = _transfer_sides(region, grid, injections.y, injections.dz)
    return encode_min(model, [side_a, side_b], name=name)


def scenario_value(model: MilpModel, region, alpha: float, delta, h, g, name: str = 'scen'):
    """min{alpha (delta - h), g}, with the reverse-flow term alpha h added for transfers."""
    terms = [alpha * (delta - h), g]
    if region.kind == 'transfer':
        terms.insert(1, alpha * h)
    return encode_min(model, terms, name=name)


def scenario_constraint(model: MilpModel, region, alpha: float, delta, h, g, rhs: float = 0.0,
                        name: str = 'scen'):
    m = scenario_value(model, region, alpha, delta, h, g, name=name)
    model.add(m <= rhs)
    return m


def scenario_value_at(region, alpha: float, delta: float, h: float, g: float) -> float:
    terms = [alpha * (delta - h), g]
    if region.kind == 'transfer':
        terms.append(alpha * h)
    return float(min(terms))


def box_from_grid(grid: Grid, host_radius: Optional[float] = None, y0: Optional[Mapping[str, float]] = None,
                  host_max: float = 1e4) -> HyperboxRegion:
    """Hyperbox with the node half-widths as scaling vectors; host radius from the load distribution bound."""
    region = HyperboxRegion(
        y0={n.id: float((y0 or {}).get(n.id, 0.0)) for n in grid.nodes},
        delta_minus={n.id: n.dy_minus for n in grid.nodes},
        delta_plus={n.id: n.dy_plus for n in grid.nodes},
        host_radius=0.0,
    )
    if host_radius is None:
        host_radius = uniqueness_bound(grid, region, host_max=host_max)
        logger.debug('Host radius from load distribution bound: %.6g', host_radius)
    return replace(region, host_radius=float(min(host_radius, host_max)))


def transfer_from_grid(grid: Grid, host_box: Optional[Tuple[Mapping[str, float], Mapping[str, float]]] = None,
                       names: Tuple[str, str] = ('A', 'B')) -> TransferRegion:
    for name in names:
        if name not in grid.regions:
            raise CaseFileError(f"transfer region needs node region '{name}'", 'regions')
    if host_box is None:
        lo = {n.id: -n.dy_minus for n in grid.nodes}
        hi = {n.id: n.dy_plus for n in grid.nodes}
    else:
        lo, hi = dict(host_box[0]), dict(host_box[1])
    return TransferRegion(
        region_a=grid.region_nodes(names[0]),
        region_b=grid.region_nodes(names[1]),
        y_lo=lo,
        y_hi=hi,
        y0={n.id: 0.0 for n in grid.nodes},
    )


def transfer_host_from_box(grid: Grid, box: HyperboxRegion, delta: float) -> TransferRegion:
    """Transfer region whose host box is T(delta) of a solved hyperbox."""
    return transfer_from_grid(grid, host_box=box.bounds(delta))


def _max_transfer(grid: Grid, region: TransferRegion, backend, config, with_violation: bool) -> Optional[float]:
    model = MilpModel('transfer_norm' if with_violation else 'transfer_host')
    injections = add_injections(model, grid, RoleAssignment(), y_bounds=region.host_bounds(), name='inj')
    if with_violation:
        grid_vars = build_grid_block(model, grid, injections, control=None, exact=False, name='blk')
        model.add(grid_vars.g <= 0)
    h = h_transfer_expr(model, region, grid, injections)
    model.maximize(h)
    outcome = backend.solve(model, time_limit=config.time_limit)
    if not outcome.has_solution:
        logger.warning('Transfer bound MILP ended with status %s', outcome.status.value)
        return None
    return value(h)


def transfer_host_radius(grid: Grid, region: TransferRegion, backend, config) -> float:
    """Largest transfer reachable in the host box, ignoring line limits."""
    try:
        radius = _max_transfer(grid, region, backend, config, with_violation=False)
        return max(radius or 0.0, 0.0)
    except Exception as e:
        logger.error('Failed to compute the transfer host radius: %s', e)
        raise


def compute_delta_norm(grid: Grid, region, backend, config) -> float:
    """
    Normalization of alpha: 1 for the hyperbox; for the transfer region the
    transfer reached when the uncertain injections become decisions.
    """
    if region.kind == 'box':
        return 1.0
    try:
        norm = _max_transfer(grid, region, backend, config, with_violation=True)
    except Exception as e:
        logger.error('Failed to compute delta_norm: %s', e)
        raise
    if norm is None or norm <= 1e-9:
        logger.warning('delta_norm could not be determined (got %s); using 1', norm)
        return 1.0
    logger.debug('delta_norm = %.6g', norm)
    return float(norm)
