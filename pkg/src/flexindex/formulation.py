"""
Grid-physics constraint blocks.

A block is assembled from three roles: the generator set-points x, the
uncertain node offsets y (measured from injection0) and the controls z. Each
role is either fixed to values or left as a decision of the model being built.
Nodal injections follow

    I_n = injection0_n + y_n + sum_{g at n} (x_g + dz_g)

where dz_g is the load-distribution offset of generator g. Flows follow the
DC approximation, phase shifters follow their five-regime law and at most one
bus-merge pair is closed.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import pyomo.environ as pyo

from flexindex.errors import InputError
from flexindex.grid_model import Edge, Grid, active_generators
from flexindex.logger import get_logger
from flexindex.milp_backend import (
    MilpModel, bounds_of, encode_abs, encode_clamp, encode_indicator, encode_max,
)

logger = get_logger('formulation')


@dataclass(frozen=True)
class ControlAssignment:
    """A fixed control decision. Phase shifters always follow their law."""
    merge: Optional[str] = None

    def describe(self) -> str:
        return f"merge:{self.merge}" if self.merge is not None else 'merge:none'


BASE_CONTROL = ControlAssignment()


@dataclass(frozen=True)
class RoleAssignment:
    """Fixed values for x, y and z; None marks a decision of the model."""
    x: Optional[Mapping[str, object]] = None
    y: Optional[Mapping[str, object]] = None
    z: Optional[ControlAssignment] = None


@dataclass
class InjectionVariables:
    x: Dict[str, object]
    y: Dict[str, object]
    t: object
    dz: Dict[str, object]
    injection: Dict[str, object]


@dataclass
class GridVariables:
    injections: InjectionVariables
    flow_bound: float
    angle_bound: float
    theta: Dict[str, object] = field(default_factory=dict)
    flow: Dict[str, object] = field(default_factory=dict)
    uncontrolled: Dict[str, object] = field(default_factory=dict)
    shift: Dict[str, object] = field(default_factory=dict)
    regimes: Dict[str, List[object]] = field(default_factory=dict)
    merge: Dict[str, object] = field(default_factory=dict)
    merge_flow: Dict[str, object] = field(default_factory=dict)
    g: object = None

    def control(self) -> ControlAssignment:
        """The merge choice at the loaded solution."""
        for pair_id, p in self.merge.items():
            if pyo.value(p) > 0.5:
                return ControlAssignment(pair_id)
        return BASE_CONTROL


def add_set_points(model: MilpModel, grid: Grid, balanced: bool = True, name: str = 'x') -> Dict[str, object]:
    """Decision set-points within [x_min, x_max], optionally balancing the forecast."""
    x = {g.id: model.var(f"{name}_{g.id}", g.x_min, g.x_max) for g in grid.generators}
    if balanced:
        model.add(sum(x.values()) + grid.total_injection0 == 0)
    return x


def add_uncertain_injections(model: MilpModel, grid: Grid, lo: Mapping[str, float], hi: Mapping[str, float],
                             name: str = 'y') -> Dict[str, object]:
    """Decision offsets within a host box; pinned dimensions become constants."""
    y = {}
    for n in grid.node_ids:
        low, high = float(lo.get(n, 0.0)), float(hi.get(n, 0.0))
        if high - low <= 1e-12:
            y[n] = low
        else:
            y[n] = model.var(f"{name}_{n}", low, high)
    return y


def redistribution_reach(grid: Grid) -> float:
    """Range of the total increase t beyond which every generator saturates."""
    return max([(g.x_max - g.x_min) / g.contribution for g in active_generators(grid)] + [0.0])


def add_redistribution(model: MilpModel, grid: Grid, x: Mapping[str, object], y: Mapping[str, object],
                       name: str = 'dist') -> Tuple[object, Dict[str, object]]:
    """
    Load distribution: dz_g = mid(x_min, x_g + c_g t, x_max) - x_g with
    sum_g dz_g = -sum_n y_n. Infeasible exactly when the generators cannot
    absorb the deviation.
    """
    reach = redistribution_reach(grid)
    t = model.var(f"{name}_t", -reach, reach)
    dz = {}
    for g in grid.generators:
        if g.contribution == 0:
            dz[g.id] = 0.0
            continue
        clamped = encode_clamp(model, x[g.id] + g.contribution * t, g.x_min, g.x_max, name=f"{name}_clamp_{g.id}")
        dz[g.id] = clamped - x[g.id]
    model.add(sum(dz.values()) + sum(y[n] for n in grid.node_ids) == 0)
    return t, dz


def add_injections(model: MilpModel, grid: Grid, roles: RoleAssignment,
                   y_bounds: Optional[Tuple[Mapping[str, float], Mapping[str, float]]] = None,
                   name: str = 'inj') -> InjectionVariables:
    if roles.x is not None:
        x = dict(roles.x)
    else:
        x = add_set_points(model, grid, name=f"{name}_x")
    if roles.y is not None:
        y = {n: roles.y.get(n, 0.0) for n in grid.node_ids}
    else:
        if y_bounds is None:
            raise ValueError('Decision offsets y need host-box bounds')
        y = add_uncertain_injections(model, grid, y_bounds[0], y_bounds[1], name=f"{name}_y")
    t, dz = add_redistribution(model, grid, x, y, name=f"{name}_dist")

    injection = {}
    for node in grid.nodes:
        expr = node.injection0 + y[node.id]
        for g in grid.generators_at[node.id]:
            expr = expr + x[g.id] + dz[g.id]
        injection[node.id] = expr
    return InjectionVariables(x=x, y=y, t=t, dz=dz, injection=injection)


def flow_bound(grid: Grid, injections: InjectionVariables) -> float:
    """Bound on any line or coupler flow: injected power plus phase-shifter circulation."""
    total = 0.0
    for n in grid.node_ids:
        lb, ub = bounds_of(injections.injection[n])
        total += max(abs(lb), abs(ub))
    for e in grid.pst_edges:
        total += e.susceptance * max(abs(e.pst.shift_min), abs(e.pst.shift_max))
    return total * (1.0 + 1e-6) + 1e-6


def add_pst_law(model: MilpModel, grid_vars: GridVariables, edge: Edge, name: str = 'pst'):
    """
    Five-regime phase-shifter law on the uncontrolled flow u = h (theta_from - theta_to):

        saturated low      u >= P + h*|shift_min|     shift = shift_min
        regulating         P <= u <= P + h*|shift_min|    flow = P
        idle               |u| <= P                   shift = 0
        regulating         mirrored                   flow = -P
        saturated high     u <= -P - h*shift_max      shift = shift_max
    """
    pst = edge.pst
    h = edge.susceptance
    reach = grid_vars.flow_bound + h * max(abs(pst.shift_min), abs(pst.shift_max))
    reach = min(reach, 2 * h * grid_vars.angle_bound)
    theta_a = grid_vars.theta[edge.from_node]
    theta_b = grid_vars.theta[edge.to_node]

    u = model.var(f"{name}_u_{edge.id}", -reach, reach)
    model.add(u == h * (theta_a - theta_b))
    shift = model.var(f"{name}_shift_{edge.id}", pst.shift_min, pst.shift_max)
    regimes = [model.var(f"{name}_regime_{edge.id}", binary=True) for _ in range(5)]
    model.add(sum(regimes) == 1)

    # adjacent regimes agree at each knee, so ties are harmless
    p_bar = pst.threshold
    knee_low = p_bar - h * pst.shift_min
    knee_high = -p_bar - h * pst.shift_max
    label = f"{name}_{edge.id}"
    r1, r2, r3, r4, r5 = regimes
    encode_indicator(model, r1, u, lo=knee_low, name=f"{label}_r1")
    encode_indicator(model, r1, shift, lo=pst.shift_min, hi=pst.shift_min, name=f"{label}_r1s")
    encode_indicator(model, r2, u, lo=p_bar, hi=knee_low, name=f"{label}_r2")
    encode_indicator(model, r2, u + h * shift, lo=p_bar, hi=p_bar, name=f"{label}_r2p")
    encode_indicator(model, r3, u, lo=-p_bar, hi=p_bar, name=f"{label}_r3")
    encode_indicator(model, r3, shift, lo=0.0, hi=0.0, name=f"{label}_r3s")
    encode_indicator(model, r4, u, lo=knee_high, hi=-p_bar, name=f"{label}_r4")
    encode_indicator(model, r4, u + h * shift, lo=-p_bar, hi=-p_bar, name=f"{label}_r4p")
    encode_indicator(model, r5, u, hi=knee_high, name=f"{label}_r5")
    encode_indicator(model, r5, shift, lo=pst.shift_max, hi=pst.shift_max, name=f"{label}_r5s")

    grid_vars.uncontrolled[edge.id] = u
    grid_vars.shift[edge.id] = shift
    grid_vars.regimes[edge.id] = regimes


def add_merge_control(model: MilpModel, grid_vars: GridVariables, grid: Grid,
                      control: Optional[ControlAssignment] = None, name: str = 'merge'):
    """
    Bus merges as couplers of infinite admittance: an open pair carries no
    flow, a closed pair equalizes the endpoint angles. At most one pair closes.
    """
    pair_ids = {b.id for b in grid.merge_pairs}
    if control is not None and control.merge is not None and control.merge not in pair_ids:
        raise ValueError(f"Unknown merge pair: {control.merge}")
    bound = grid_vars.flow_bound
    spread = 2 * grid_vars.angle_bound
    selectors = []
    for pair in grid.merge_pairs:
        theta_a = grid_vars.theta[pair.node_a]
        theta_b = grid_vars.theta[pair.node_b]
        if control is not None:
            closed = 1 if pair.id == control.merge else 0
            grid_vars.merge[pair.id] = closed
            if closed:
                flow = model.var(f"{name}_flow_{pair.id}", -bound, bound)
                model.add(theta_a == theta_b)
            else:
                flow = 0.0
            grid_vars.merge_flow[pair.id] = flow
            continue

        p = model.var(f"{name}_p_{pair.id}", binary=True)
        flow = model.var(f"{name}_flow_{pair.id}", -bound, bound)
        model.add(flow <= bound * p)
        model.add(flow >= -bound * p)
        model.add(theta_a - theta_b <= spread * (1 - p))
        model.add(theta_b - theta_a <= spread * (1 - p))
        model.record_big_m(f"{name}_{pair.id}:angle", theta_a - theta_b, spread, 1 - p)
        selectors.append(p)
        grid_vars.merge[pair.id] = p
        grid_vars.merge_flow[pair.id] = flow
    if selectors:
        model.add(sum(selectors) <= 1)


def add_dc_physics(model: MilpModel, grid: Grid, injections: InjectionVariables,
                   control: Optional[ControlAssignment] = None, name: str = 'phys') -> GridVariables:
    """DC flows, nodal balances, phase-shifter law and merge control for one control copy."""
    angle = grid.angle_bound
    grid_vars = GridVariables(injections=injections, flow_bound=flow_bound(grid, injections), angle_bound=angle)
    for n in grid.node_ids:
        if n == grid.reference_node:
            grid_vars.theta[n] = 0.0
        else:
            grid_vars.theta[n] = model.var(f"{name}_theta_{n}", -angle, angle)

    for edge in grid.pst_edges:
        add_pst_law(model, grid_vars, edge, name=f"{name}_pst")
    add_merge_control(model, grid_vars, grid, control, name=f"{name}_merge")

    outflow = {n: 0.0 for n in grid.node_ids}
    for edge in grid.edges:
        h = edge.susceptance
        span = 2 * angle + (edge.pst.shift_max - edge.pst.shift_min if edge.pst else 0.0)
        bound = min(grid_vars.flow_bound, h * span)
        flow = model.var(f"{name}_flow_{edge.id}", -bound, bound)
        shift = grid_vars.shift.get(edge.id, 0.0)
        model.add(flow == h * (grid_vars.theta[edge.from_node] - grid_vars.theta[edge.to_node] + shift))
        grid_vars.flow[edge.id] = flow
        outflow[edge.from_node] = outflow[edge.from_node] + flow
        outflow[edge.to_node] = outflow[edge.to_node] - flow
    for pair in grid.merge_pairs:
        flow = grid_vars.merge_flow[pair.id]
        outflow[pair.node_a] = outflow[pair.node_a] + flow
        outflow[pair.node_b] = outflow[pair.node_b] - flow

    for n in grid.node_ids:
        model.add(injections.injection[n] == outflow[n])
    return grid_vars


def add_violation(model: MilpModel, grid_vars: GridVariables, grid: Grid, exact: bool = True,
                  name: str = 'viol'):
    """
    Largest relative overload g = max_e |P_e| / limit_e - 1 over critical edges.

    With exact=False only g >= each term is imposed, which suffices where g is
    minimized or bounded from above.
    """
    critical = grid.critical_edges
    if not critical:
        raise InputError('The grid has no critical edges to monitor')
    if exact:
        terms = []
        for edge in critical:
            magnitude = encode_abs(model, grid_vars.flow[edge.id], name=f"{name}_abs_{edge.id}")
            terms.append(magnitude / edge.limit - 1)
        g = encode_max(model, terms, name=f"{name}_g")
    else:
        top = max(bounds_of(grid_vars.flow[e.id])[1] / e.limit for e in critical) - 1
        g = model.var(f"{name}_g", -1.0, max(top, -1.0))
        for edge in critical:
            model.add(g >= grid_vars.flow[edge.id] / edge.limit - 1)
            model.add(g >= -grid_vars.flow[edge.id] / edge.limit - 1)
    grid_vars.g = g
    return g


def build_grid_block(model: MilpModel, grid: Grid, injections: InjectionVariables,
                     control: Optional[ControlAssignment] = None, exact: bool = True,
                     name: str = 'blk') -> GridVariables:
    grid_vars = add_dc_physics(model, grid, injections, control, name=name)
    add_violation(model, grid_vars, grid, exact=exact, name=f"{name}_viol")
    return grid_vars
