"""
Grid domain types, case-file ingestion and structural validation.

Units are fixed: MW for power, rad for angles, MW/rad for susceptance. Node
uncertainty (dy_minus, dy_plus) and generator set-point bounds are given as
offsets in MW. Identifiers are normalized to strings on load.
"""
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Dict, Iterable, List, Mapping, Optional, Tuple
import json
import math
import os

import networkx as nx
import numpy as np
import pandas as pd
import yaml

from flexindex.errors import CaseFileError, ConfigError, InputError
from flexindex.logger import get_logger

logger = get_logger('grid_model')

UNITS = {'power': 'MW', 'angle': 'rad'}
CONTRIBUTION_TOL = 1e-9
DEFAULT_ANGLE_BOUND = 2 * math.pi * 4

TOP_LEVEL_KEYS = {'units', 'reference_node', 'nodes', 'generators', 'edges', 'merge_pairs', 'regions', 'angle_bound'}
NODE_KEYS = {'id', 'injection0', 'dy_minus', 'dy_plus'}
GENERATOR_KEYS = {'id', 'node', 'x_min', 'x_max', 'contribution'}
EDGE_KEYS = {'id', 'from', 'to', 'susceptance', 'limit', 'pst'}
PST_KEYS = {'threshold', 'shift_min', 'shift_max'}
MERGE_KEYS = {'id', 'node_a', 'node_b'}


@dataclass(frozen=True)
class Node:
    id: str
    injection0: float
    dy_minus: float = 0.0
    dy_plus: float = 0.0


@dataclass(frozen=True)
class Generator:
    id: str
    node: str
    x_min: float
    x_max: float
    contribution: float


@dataclass(frozen=True)
class PstSpec:
    threshold: float
    shift_min: float
    shift_max: float


@dataclass(frozen=True)
class Edge:
    id: str
    from_node: str
    to_node: str
    susceptance: float
    limit: Optional[float] = None
    pst: Optional[PstSpec] = None

    @property
    def critical(self) -> bool:
        return self.limit is not None


@dataclass(frozen=True)
class MergePair:
    id: str
    node_a: str
    node_b: str


@dataclass(frozen=True)
class Grid:
    """An immutable, validated grid. Build it through parse_grid or grid_from_dict."""
    nodes: Tuple[Node, ...]
    generators: Tuple[Generator, ...]
    edges: Tuple[Edge, ...]
    merge_pairs: Tuple[MergePair, ...]
    reference_node: str
    regions: Mapping[str, Tuple[str, ...]] = field(default_factory=dict)
    angle_bound: float = DEFAULT_ANGLE_BOUND

    @cached_property
    def node_ids(self) -> List[str]:
        return [n.id for n in self.nodes]

    @cached_property
    def node_index(self) -> Dict[str, int]:
        return {n.id: i for i, n in enumerate(self.nodes)}

    @cached_property
    def node_map(self) -> Dict[str, Node]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def generator_map(self) -> Dict[str, Generator]:
        return {g.id: g for g in self.generators}

    @cached_property
    def edge_map(self) -> Dict[str, Edge]:
        return {e.id: e for e in self.edges}

    @cached_property
    def generators_at(self) -> Dict[str, List[Generator]]:
        at = {n.id: [] for n in self.nodes}
        for g in self.generators:
            at[g.node].append(g)
        return at

    @property
    def critical_edges(self) -> List[Edge]:
        return [e for e in self.edges if e.critical]

    @property
    def pst_edges(self) -> List[Edge]:
        return [e for e in self.edges if e.pst is not None]

    @property
    def total_injection0(self) -> float:
        return float(sum(n.injection0 for n in self.nodes))

    def region_nodes(self, name: str) -> Tuple[str, ...]:
        if name not in self.regions:
            raise KeyError(f"Grid has no region '{name}'")
        return tuple(self.regions[name])

    def region_generators(self, name: str) -> List[Generator]:
        members = set(self.region_nodes(name))
        return [g for g in self.generators if g.node in members]


def active_generators(grid: Grid) -> List[Generator]:
    """Generators that take part in load distribution (c_g != 0)."""
    return [g for g in grid.generators if g.contribution != 0]


def _number(value, path: str, minimum: Optional[float] = None, strict_min: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CaseFileError(f"expected a number, got {value!r}", path)
    value = float(value)
    if not math.isfinite(value):
        raise CaseFileError(f"expected a finite number, got {value}", path)
    if minimum is not None:
        if strict_min and not value > minimum:
            raise CaseFileError(f"must be > {minimum:g}, got {value:g}", path)
        if not strict_min and value < minimum:
            raise CaseFileError(f"must be >= {minimum:g}, got {value:g}", path)
    return value


def _identifier(value, path: str) -> str:
    if isinstance(value, bool) or not isinstance(value, (str, int)):
        raise CaseFileError(f"expected an identifier, got {value!r}", path)
    return str(value)


def _check_keys(entry, allowed: set, required: Iterable[str], path: str, strict: bool):
    if not isinstance(entry, dict):
        raise CaseFileError(f"expected an object, got {type(entry).__name__}", path)
    for key in required:
        if key not in entry:
            raise CaseFileError('missing required field', f"{path}.{key}" if path else key)
    unknown = sorted(set(entry) - allowed)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        if strict:
            raise CaseFileError('unknown field (use lenient mode to ignore)', where)
        logger.warning('Ignoring unknown fields %s at %s', unknown, path or 'top level')


def _list(data: dict, key: str, required: bool = True) -> list:
    if key not in data:
        if required:
            raise CaseFileError('missing required field', key)
        return []
    value = data[key]
    if not isinstance(value, list):
        raise CaseFileError(f"expected a list, got {type(value).__name__}", key)
    return value


def grid_from_dict(data: dict, strict: bool = True) -> Grid:
    """Validate a decoded case-file document and build the Grid."""
    _check_keys(data, TOP_LEVEL_KEYS, ('reference_node', 'nodes', 'generators', 'edges'), '', strict)

    units = data.get('units', UNITS)
    if not isinstance(units, dict) or any(units.get(k, v) != v for k, v in UNITS.items()):
        raise CaseFileError(f"unsupported units {units!r}, expected {UNITS}", 'units')

    nodes = []
    seen = set()
    for i, entry in enumerate(_list(data, 'nodes')):
        path = f"nodes[{i}]"
        _check_keys(entry, NODE_KEYS, ('id', 'injection0'), path, strict)
        node_id = _identifier(entry['id'], f"{path}.id")
        if node_id in seen:
            raise CaseFileError(f"duplicate node id '{node_id}'", f"{path}.id")
        seen.add(node_id)
        nodes.append(Node(
            id=node_id,
            injection0=_number(entry['injection0'], f"{path}.injection0"),
            dy_minus=_number(entry.get('dy_minus', 0.0), f"{path}.dy_minus", minimum=0.0),
            dy_plus=_number(entry.get('dy_plus', 0.0), f"{path}.dy_plus", minimum=0.0),
        ))
    if not nodes:
        raise CaseFileError('a grid needs at least one node', 'nodes')

    def node_ref(value, path):
        ref = _identifier(value, path)
        if ref not in seen:
            raise CaseFileError(f"unknown node '{ref}'", path)
        return ref

    reference = node_ref(data['reference_node'], 'reference_node')

    generators = []
    gen_ids = set()
    for i, entry in enumerate(_list(data, 'generators')):
        path = f"generators[{i}]"
        _check_keys(entry, GENERATOR_KEYS, GENERATOR_KEYS, path, strict)
        gen_id = _identifier(entry['id'], f"{path}.id")
        if gen_id in gen_ids:
            raise CaseFileError(f"duplicate generator id '{gen_id}'", f"{path}.id")
        gen_ids.add(gen_id)
        x_min = _number(entry['x_min'], f"{path}.x_min")
        x_max = _number(entry['x_max'], f"{path}.x_max")
        if x_min > x_max:
            raise CaseFileError(f"x_min {x_min:g} exceeds x_max {x_max:g}", f"{path}.x_min")
        generators.append(Generator(
            id=gen_id,
            node=node_ref(entry['node'], f"{path}.node"),
            x_min=x_min,
            x_max=x_max,
            contribution=_number(entry['contribution'], f"{path}.contribution", minimum=0.0),
        ))
    total_c = sum(g.contribution for g in generators)
    if abs(total_c - 1.0) > CONTRIBUTION_TOL:
        raise CaseFileError(f"contribution factors sum to {round(total_c, 9):g}", 'generators')

    edges = []
    edge_ids = set()
    for i, entry in enumerate(_list(data, 'edges')):
        path = f"edges[{i}]"
        _check_keys(entry, EDGE_KEYS, ('id', 'from', 'to', 'susceptance'), path, strict)
        edge_id = _identifier(entry['id'], f"{path}.id")
        if edge_id in edge_ids:
            raise CaseFileError(f"duplicate edge id '{edge_id}'", f"{path}.id")
        edge_ids.add(edge_id)
        src = node_ref(entry['from'], f"{path}.from")
        dst = node_ref(entry['to'], f"{path}.to")
        if src == dst:
            raise CaseFileError('edge endpoints must differ', f"{path}.to")
        limit = entry.get('limit')
        if limit is not None:
            limit = _number(limit, f"{path}.limit", minimum=0.0, strict_min=True)
        pst = None
        if entry.get('pst') is not None:
            ppath = f"{path}.pst"
            _check_keys(entry['pst'], PST_KEYS, PST_KEYS, ppath, strict)
            shift_min = _number(entry['pst']['shift_min'], f"{ppath}.shift_min")
            shift_max = _number(entry['pst']['shift_max'], f"{ppath}.shift_max")
            if shift_min > 0:
                raise CaseFileError(f"must be <= 0, got {shift_min:g}", f"{ppath}.shift_min")
            if shift_max < 0:
                raise CaseFileError(f"must be >= 0, got {shift_max:g}", f"{ppath}.shift_max")
            pst = PstSpec(
                threshold=_number(entry['pst']['threshold'], f"{ppath}.threshold", minimum=0.0),
                shift_min=shift_min,
                shift_max=shift_max,
            )
        edges.append(Edge(
            id=edge_id,
            from_node=src,
            to_node=dst,
            susceptance=_number(entry['susceptance'], f"{path}.susceptance", minimum=0.0, strict_min=True),
            limit=limit,
            pst=pst,
        ))

    merge_pairs = []
    pair_ids = set()
    for i, entry in enumerate(_list(data, 'merge_pairs', required=False)):
        path = f"merge_pairs[{i}]"
        _check_keys(entry, MERGE_KEYS, MERGE_KEYS, path, strict)
        pair_id = _identifier(entry['id'], f"{path}.id")
        if pair_id in pair_ids:
            raise CaseFileError(f"duplicate merge pair id '{pair_id}'", f"{path}.id")
        pair_ids.add(pair_id)
        a = node_ref(entry['node_a'], f"{path}.node_a")
        b = node_ref(entry['node_b'], f"{path}.node_b")
        if a == b:
            raise CaseFileError('merge pair nodes must differ', f"{path}.node_b")
        merge_pairs.append(MergePair(id=pair_id, node_a=a, node_b=b))

    for i, pair in enumerate(merge_pairs):
        ends = {pair.node_a, pair.node_b}
        for edge in edges:
            if edge.pst is not None and {edge.from_node, edge.to_node} == ends:
                raise CaseFileError(f"phase shifter on edge '{edge.id}' coincides with a merge pair",
                                    f"merge_pairs[{i}]")

    regions = {}
    raw_regions = data.get('regions') or {}
    if not isinstance(raw_regions, dict):
        raise CaseFileError('expected an object of node-id lists', 'regions')
    assigned = {}
    for name, members in raw_regions.items():
        path = f"regions.{name}"
        if not isinstance(members, list):
            raise CaseFileError('expected a list of node ids', path)
        ids = []
        for j, member in enumerate(members):
            ref = node_ref(member, f"{path}[{j}]")
            if ref in assigned:
                raise CaseFileError(f"node '{ref}' already belongs to region '{assigned[ref]}'", f"{path}[{j}]")
            assigned[ref] = name
            ids.append(ref)
        regions[str(name)] = tuple(ids)

    angle_bound = DEFAULT_ANGLE_BOUND
    if data.get('angle_bound') is not None:
        angle_bound = _number(data['angle_bound'], 'angle_bound', minimum=0.0, strict_min=True)

    grid = Grid(
        nodes=tuple(nodes),
        generators=tuple(generators),
        edges=tuple(edges),
        merge_pairs=tuple(merge_pairs),
        reference_node=reference,
        regions=regions,
        angle_bound=angle_bound,
    )
    if not is_connected(grid):
        raise CaseFileError('grid graph is not connected', 'edges')
    return grid


def is_connected(grid: Grid) -> bool:
    """Connectivity over all lines, with merge pairs counted as closable couplers."""
    graph = nx.MultiGraph()
    graph.add_nodes_from(grid.node_ids)
    graph.add_edges_from((e.from_node, e.to_node) for e in grid.edges)
    graph.add_edges_from((b.node_a, b.node_b) for b in grid.merge_pairs)
    return nx.is_connected(graph)


def parse_grid(path: str, strict: bool = True) -> Grid:
    """Load and validate a JSON case file."""
    try:
        with open(path, 'r') as file:
            data = json.load(file)
    except json.JSONDecodeError as e:
        logger.error('Failed to decode case file %s: %s', path, e)
        raise CaseFileError(f"invalid JSON: {e}", '$') from e
    except FileNotFoundError:
        logger.error('Case file not found: %s', path)
        raise
    try:
        grid = grid_from_dict(data, strict=strict)
        logger.debug('Grid loaded from %s: %s', path, grid_summary(grid))
        return grid
    except CaseFileError as e:
        logger.error('Invalid case file %s: %s', path, e)
        raise


def serialize_grid(grid: Grid) -> dict:
    """Inverse of grid_from_dict."""
    edges = []
    for e in grid.edges:
        entry = {'id': e.id, 'from': e.from_node, 'to': e.to_node, 'susceptance': e.susceptance}
        if e.limit is not None:
            entry['limit'] = e.limit
        if e.pst is not None:
            entry['pst'] = {'threshold': e.pst.threshold, 'shift_min': e.pst.shift_min, 'shift_max': e.pst.shift_max}
        edges.append(entry)
    data = {
        'units': dict(UNITS),
        'reference_node': grid.reference_node,
        'nodes': [{'id': n.id, 'injection0': n.injection0, 'dy_minus': n.dy_minus, 'dy_plus': n.dy_plus}
                  for n in grid.nodes],
        'generators': [{'id': g.id, 'node': g.node, 'x_min': g.x_min, 'x_max': g.x_max,
                        'contribution': g.contribution} for g in grid.generators],
        'edges': edges,
        'merge_pairs': [{'id': b.id, 'node_a': b.node_a, 'node_b': b.node_b} for b in grid.merge_pairs],
    }
    if grid.regions:
        data['regions'] = {name: list(ids) for name, ids in grid.regions.items()}
    if grid.angle_bound != DEFAULT_ANGLE_BOUND:
        data['angle_bound'] = grid.angle_bound
    return data


def write_grid(grid: Grid, path: str) -> None:
    try:
        os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
        with open(path, 'w') as file:
            json.dump(serialize_grid(grid), file, indent=4)
        logger.debug('Grid written to %s', path)
    except Exception as e:
        logger.error('Error while writing grid: %s', e)
        raise


def _records(df: pd.DataFrame) -> List[dict]:
    """DataFrame rows as dicts with NaN cells dropped."""
    rows = []
    for row in df.to_dict(orient='records'):
        rows.append({k: v for k, v in row.items() if not (isinstance(v, float) and math.isnan(v))})
    return rows


def parse_grid_tables(directory: str, strict: bool = True) -> Grid:
    """
    Load a grid stored as CSV tables.

    Expected files: nodes.csv, generators.csv, edges.csv, optionally
    merge_pairs.csv, and meta.yaml holding reference_node, regions and
    angle_bound. Phase shifters are given in edges.csv through the columns
    pst_threshold, pst_shift_min and pst_shift_max.
    """
    try:
        def read(name, id_columns, required=True):
            path = os.path.join(directory, name)
            if not os.path.exists(path):
                if required:
                    raise FileNotFoundError(path)
                return []
            df = pd.read_csv(path, dtype={c: str for c in id_columns})
            return _records(df)

        meta_path = os.path.join(directory, 'meta.yaml')
        with open(meta_path, 'r') as file:
            meta = yaml.safe_load(file) or {}

        edges = []
        for row in read('edges.csv', ('id', 'from', 'to')):
            pst = {k[len('pst_'):]: row.pop(k) for k in list(row) if k.startswith('pst_')}
            if pst:
                row['pst'] = pst
            edges.append(row)

        data = dict(meta)
        data['nodes'] = read('nodes.csv', ('id',))
        data['generators'] = read('generators.csv', ('id', 'node'))
        data['edges'] = edges
        data['merge_pairs'] = read('merge_pairs.csv', ('id', 'node_a', 'node_b'), required=False)
        grid = grid_from_dict(data, strict=strict)
        logger.debug('Grid tables loaded from %s: %s', directory, grid_summary(grid))
        return grid
    except Exception as e:
        logger.error('Failed to load grid tables from %s: %s', directory, e)
        raise


def grid_summary(grid: Grid) -> dict:
    return {
        'nodes': len(grid.nodes),
        'generators': len(grid.generators),
        'active_generators': len(active_generators(grid)),
        'edges': len(grid.edges),
        'phase_shifters': len(grid.pst_edges),
        'critical_edges': len(grid.critical_edges),
        'bus_merges': len(grid.merge_pairs),
        'uncertain_nodes': sum(1 for n in grid.nodes if n.dy_minus > 0 or n.dy_plus > 0),
    }


def with_relative_uncertainty(grid: Grid, fraction: float, nodes: Optional[Iterable[str]] = None) -> Grid:
    """Set dy_minus = dy_plus = fraction * |injection0| on the selected nodes (default: non-generator nodes)."""
    if fraction < 0:
        raise ConfigError(f"fraction must be non-negative, got {fraction}")
    if nodes is None:
        gen_nodes = {g.node for g in grid.generators}
        selected = {n.id for n in grid.nodes if n.id not in gen_nodes}
    else:
        selected = set(nodes)
    updated = tuple(
        replace(n, dy_minus=fraction * abs(n.injection0), dy_plus=fraction * abs(n.injection0))
        if n.id in selected else n
        for n in grid.nodes
    )
    return replace(grid, nodes=updated)


def scale_generator_bounds(grid: Grid, factor: float) -> Grid:
    if factor <= 0:
        raise ConfigError(f"factor must be positive, got {factor}")
    updated = tuple(replace(g, x_max=max(g.x_min, g.x_max * factor)) for g in grid.generators)
    return replace(grid, generators=updated)


def redistribution_offsets(grid: Grid, x: Mapping[str, float], t: float) -> Dict[str, float]:
    """Per-generator offsets mid(x_min, x_g + c_g t, x_max) - x_g for a given total increase t."""
    return {
        g.id: float(np.clip(x[g.id] + g.contribution * t, g.x_min, g.x_max) - x[g.id])
        for g in grid.generators
    }


def redistribute(grid: Grid, x: Mapping[str, float], total: float, tol: float = 1e-12) -> Tuple[float, Dict[str, float]]:
    """
    Solve sum_g mid(x_min, x_g + c_g t, x_max) - x_g = total for t by bisection.

    :return: (t, offsets per generator)
    :raises ValueError: if the generators cannot absorb the requested total
    """
    active = active_generators(grid)
    low = sum(g.x_min - x[g.id] for g in active)
    high = sum(g.x_max - x[g.id] for g in active)
    if total < low - 1e-9 or total > high + 1e-9:
        raise InputError(f"redistribution of {total:g} MW outside the capacity range [{low:g}, {high:g}]")
    reach = max([(g.x_max - g.x_min) / g.contribution for g in active] + [0.0])
    lo, hi = -reach, reach

    def excess(t):
        return sum(redistribution_offsets(grid, x, t).values()) - total

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if excess(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, reach):
            break
    t = 0.5 * (lo + hi)
    return t, redistribution_offsets(grid, x, t)


def uniqueness_bound(grid: Grid, region, host_max: float = 1e4) -> float:
    """
    Largest hyperbox radius for which load distribution stays feasible.

    Only generators with a nonzero contribution follow the deviation; the
    set-points of the others shift the window they must absorb, and are
    placed where the window is centred best. Returns 0 when the nominal
    point cannot be balanced and host_max when the region does not grow.
    """
    if getattr(region, 'kind', None) != 'box':
        raise ValueError('uniqueness_bound is defined for the hyperbox region only')
    active = active_generators(grid)
    idle = [g for g in grid.generators if g.contribution == 0]
    if idle:
        logger.warning('Generators %s have zero contribution and cannot follow load distribution',
                       [g.id for g in idle])
    s0 = grid.total_injection0 + sum(region.y0.get(n, 0.0) for n in grid.node_ids)
    lower = -sum(g.x_max for g in active)
    upper = -sum(g.x_min for g in active)
    idle_low = sum(g.x_min for g in idle)
    idle_high = sum(g.x_max for g in idle)
    down = sum(region.delta_minus.get(n, 0.0) for n in grid.node_ids)
    up = sum(region.delta_plus.get(n, 0.0) for n in grid.node_ids)

    if down > 0 and up > 0:
        centre = (lower * up + upper * down) / (up + down) - s0
    elif down > 0:
        centre = idle_high
    else:
        centre = idle_low
    shift = float(np.clip(centre, idle_low, idle_high))
    if s0 + shift < lower - 1e-12 or s0 + shift > upper + 1e-12:
        logger.warning('Nominal injections %.6g violate the load distribution range [%.6g, %.6g]',
                       s0 + shift, lower, upper)
        return 0.0
    bound = host_max
    if down > 0:
        bound = min(bound, (s0 + shift - lower) / down)
    if up > 0:
        bound = min(bound, (upper - s0 - shift) / up)
    return float(max(bound, 0.0))
