"""
Command-line front end.

    python -m flexindex solve    cases/motivating_example.json
    python -m flexindex evaluate cases/two_node.json --x x.json
    python -m flexindex check    cases/two_node.json --x x.json --sample 41
    python -m flexindex oracle   cases/two_node.json
    python -m flexindex info     cases/two_node.json
    python -m flexindex sweep    cases/motivating_example.json

Exit codes: 0 certified / done, 1 input error or infeasible base case,
2 solver failure or missing backend, 3 stopped without certificate.
"""
from dataclasses import asdict, dataclass, field, replace
from itertools import product
from typing import Dict, List, Optional
import argparse
import hashlib
import json
import math
import os
import sys
import time

import numpy as np
import pandas as pd
import yaml

from flexindex import __version__
from flexindex.errors import (
    BackendUnavailableError, CaseFileError, ConfigError, InfeasibleBaseCase, InputError, OracleCapExceeded,
    SolverFailure,
)
from flexindex.esip_solver import FEAS_TOL, solve_flexibility
from flexindex.grid_model import (
    DEFAULT_ANGLE_BOUND, Grid, grid_summary, parse_grid, parse_grid_tables, uniqueness_bound,
)
from flexindex.logger import get_logger
from flexindex.milp_backend import create_backend
from flexindex.oracle import OracleConfig, oracle_best, oracle_flexibility_at, oracle_slack
from flexindex.params import Config, load_config, load_params, solver_config_from
from flexindex.subproblems import base_case_violation, evaluate_flexibility_at, inner_min, region_h
from flexindex.tracking import log_run, save_report
from flexindex.uncertainty_regions import (
    box_from_grid, transfer_from_grid, transfer_host_from_box, transfer_host_radius,
)

logger = get_logger('cli')

REPORT_SCHEMA = 1
TOGGLES = ('use_transformation', 'use_dropping', 'use_auxiliary')


@dataclass
class RunReport:
    command: str
    case: str
    input_digest: str
    config: dict
    result: dict
    iteration_log: Optional[str] = None
    timings: Dict[str, float] = field(default_factory=dict)
    version: str = __version__
    schema: int = REPORT_SCHEMA

    def __post_init__(self):
        low, high = self.result.get('delta_guaranteed'), self.result.get('delta_optimistic')
        if low is not None and high is not None and low > high + 1e-9:
            raise ValueError(f"report interval is empty: [{low}, {high}]")

    def to_dict(self) -> dict:
        return asdict(self)


def input_digest(path: str) -> str:
    """sha256 of a case file, or of every file of a table directory in name order."""
    digest = hashlib.sha256()
    paths = [path]
    if os.path.isdir(path):
        paths = [os.path.join(path, f) for f in sorted(os.listdir(path))
                 if os.path.isfile(os.path.join(path, f))]
    for p in paths:
        with open(p, 'rb') as file:
            digest.update(file.read())
    return digest.hexdigest()


def load_case(path: str, strict: bool = True, angle_bound: Optional[float] = None) -> Grid:
    grid = parse_grid_tables(path, strict=strict) if os.path.isdir(path) else parse_grid(path, strict=strict)
    if angle_bound is not None and grid.angle_bound == DEFAULT_ANGLE_BOUND and angle_bound != grid.angle_bound:
        grid = replace(grid, angle_bound=float(angle_bound))
    return grid


def load_vector(path: str) -> Dict[str, float]:
    """A JSON object of id -> MW, or a report whose result carries 'x'."""
    try:
        with open(path, 'r') as file:
            data = json.load(file)
    except json.JSONDecodeError as e:
        logger.error('Failed to decode vector file %s: %s', path, e)
        raise CaseFileError(f"invalid JSON: {e}", path) from e
    if isinstance(data, dict) and isinstance(data.get('result'), dict) and 'x' in data['result']:
        data = data['result']['x']
    if not isinstance(data, dict):
        raise CaseFileError('expected an object of id -> value', path)
    try:
        return {str(k): float(v) for k, v in data.items()}
    except (TypeError, ValueError) as e:
        raise CaseFileError(f"non-numeric entry: {e}", path) from e


def check_set_points(grid: Grid, x: Dict[str, float], tol: float = 1e-6) -> Dict[str, float]:
    missing = [g.id for g in grid.generators if g.id not in x]
    if missing:
        raise InputError(f"set-points missing for generators {missing}")
    unknown = sorted(set(x) - set(grid.generator_map))
    if unknown:
        raise InputError(f"set-points given for unknown generators {unknown}")
    for g in grid.generators:
        if not g.x_min - tol <= x[g.id] <= g.x_max + tol:
            raise InputError(f"set-point of {g.id} = {x[g.id]:g} outside [{g.x_min:g}, {g.x_max:g}]")
    imbalance = sum(x.values()) + grid.total_injection0
    if abs(imbalance) > tol:
        raise InputError(f"set-points are not balanced: sum x + sum injection0 = {imbalance:g}")
    return x


def check_scenario(grid: Grid, y: Dict[str, float]) -> Dict[str, float]:
    unknown = sorted(set(y) - set(grid.node_map))
    if unknown:
        raise InputError(f"scenario given for unknown nodes {unknown}")
    return {n: y.get(n, 0.0) for n in grid.node_ids}


def build_config(args) -> Config:
    params = load_params(args.params) if os.path.exists(args.params) else {}
    config = load_config(args.config) if os.path.exists(args.config) else {}
    overrides = {
        'alpha_prime': getattr(args, 'alpha_prime', None),
        'rel_tol': getattr(args, 'rel_tol', None),
        'eps_r0': getattr(args, 'eps_r0', None),
        'r_r': getattr(args, 'r_r', None),
        'seed': getattr(args, 'seed', None),
        'time_limit': getattr(args, 'time_limit', None),
        'dump_lp': getattr(args, 'dump_lp', None),
    }
    for flag, key in (('no_transformation', 'use_transformation'), ('no_dropping', 'use_dropping'),
                      ('no_auxiliary', 'use_auxiliary')):
        if getattr(args, flag, False):
            overrides[key] = False
    if getattr(args, 'single_thread', False):
        overrides['single_thread'] = True
    args.params_data, args.config_data = params, config
    if getattr(args, 'out', None) is None:
        args.out = config.get('output', {}).get('reports_dir', 'reports')
    return solver_config_from(params.get('solve'), config, overrides)


def build_region(grid: Grid, args, cfg: Config):
    kind = args.region or args.config_data.get('region', {}).get('type', 'box')
    if kind == 'box':
        return box_from_grid(grid, host_max=cfg.host_max)
    if kind != 'transfer':
        raise ConfigError(f"Unknown region type: {kind}")
    if args.host_from_box is not None:
        box = box_from_grid(grid, host_max=cfg.host_max)
        return transfer_host_from_box(grid, box, args.host_from_box)
    return transfer_from_grid(grid)


def available_backend(cfg: Config):
    backend = create_backend(cfg)
    if not backend.available():
        raise BackendUnavailableError(f"MILP solver '{cfg.solver}' is not available")
    return backend


def with_host_radius(grid: Grid, region, backend, cfg: Config):
    if region.host_radius is None:
        region = replace(region, host_radius=transfer_host_radius(grid, region, backend, cfg))
    return region


def oracle_config(args) -> OracleConfig:
    values = dict(args.config_data.get('oracle', {}))
    values.update(args.params_data.get('oracle', {}) or {})
    return OracleConfig.from_dict(values)


def _prepare(args):
    cfg = build_config(args)
    grid = load_case(args.case, strict=not args.lenient, angle_bound=cfg.angle_bound)
    region = build_region(grid, args, cfg)
    return cfg, grid, region


def _report_path(args, name: str) -> str:
    return os.path.join(args.out, f"{name}.json")


def _emit(report: RunReport, path: str):
    save_report(report.to_dict(), path)
    print(json.dumps(report.result, indent=2, default=str))


def cmd_solve(args) -> int:
    started = time.monotonic()
    cfg, grid, region = _prepare(args)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, 'iterations.jsonl')
    result = solve_flexibility(grid, region, cfg, log_path=log_path)
    summary = result.to_dict()
    report = RunReport(
        command='solve',
        case=args.case,
        input_digest=input_digest(args.case),
        config=asdict(cfg),
        result=summary,
        iteration_log=log_path,
        timings={'solve_s': result.wall_s, 'total_s': time.monotonic() - started},
    )
    _emit(report, _report_path(args, 'solve'))
    if not args.no_track:
        log_run(summary, {**asdict(cfg), 'region': region.kind, 'case': args.case})
    return 0 if result.certified else 3


def cmd_evaluate(args) -> int:
    started = time.monotonic()
    cfg, grid, region = _prepare(args)
    x = check_set_points(grid, load_vector(args.x))
    backend = available_backend(cfg)
    region = with_host_radius(grid, region, backend, cfg)
    base = base_case_violation(grid, region, backend, x)
    if base > FEAS_TOL:
        raise InfeasibleBaseCase(f"set-points violate the base case (overload {base:g})")
    aux = evaluate_flexibility_at(grid, region, backend, cfg, x, deadline=started + cfg.time_limit)
    result = {
        'delta_wc_relax': aux.delta_wc_relax,
        'delta_upper': aux.upper,
        'witness': aux.y_witness,
        'certified': aux.certified,
        'iterations': aux.iterations,
        'x': x,
        'region': region.kind,
    }
    logger.info('Flexibility of the given set-points: %.6g (witness bound %.6g)', aux.delta_wc_relax, aux.upper)
    report = RunReport(
        command='evaluate',
        case=args.case,
        input_digest=input_digest(args.case),
        config=asdict(cfg),
        result=result,
        timings={'total_s': time.monotonic() - started},
    )
    _emit(report, _report_path(args, 'evaluate'))
    return 0 if aux.certified else 3


def sample_points(grid: Grid, region, count: int, seed: int = 0) -> List[Dict[str, float]]:
    """count points per uncertain axis when at most two axes vary; count random host points otherwise."""
    lo, hi = region.host_bounds()
    axes = [n for n in grid.node_ids if hi.get(n, 0.0) - lo.get(n, 0.0) > 1e-12]
    base = {n: lo.get(n, 0.0) for n in grid.node_ids}
    if len(axes) <= 2:
        grids = [np.linspace(lo[n], hi[n], count) for n in axes]
        return [{**base, **dict(zip(axes, map(float, values)))} for values in product(*grids)]
    rng = np.random.default_rng(seed)
    draws = rng.uniform([lo[n] for n in axes], [hi[n] for n in axes], size=(count, len(axes)))
    return [{**base, **dict(zip(axes, map(float, row)))} for row in draws]


def sample_region(grid: Grid, region, backend, x: Dict[str, float], count: int, seed: int = 0) -> pd.DataFrame:
    rows = []
    for y in sample_points(grid, region, count, seed):
        try:
            g = inner_min(grid, region, backend, x, y).g_star
            h = region_h(region, grid, x, y)
        except InputError:
            g, h = math.inf, math.nan
        row = {f"y_{n}": v for n, v in y.items()}
        row.update({'h': h, 'manageable': int(g <= FEAS_TOL)})
        rows.append(row)
    return pd.DataFrame(rows)


def cmd_check(args) -> int:
    started = time.monotonic()
    cfg, grid, region = _prepare(args)
    x = check_set_points(grid, load_vector(args.x))
    y = check_scenario(grid, load_vector(args.y)) if args.y else check_scenario(grid, dict(region.y0))
    backend = available_backend(cfg)
    region = with_host_radius(grid, region, backend, cfg)
    inner = inner_min(grid, region, backend, x, y)
    result = {
        'g_star': inner.g_star,
        'manageable': inner.g_star <= FEAS_TOL,
        'control': inner.z_star.describe(),
        'flows': inner.flows,
        'h': region_h(region, grid, x, y),
        'x': x,
        'y': y,
    }
    if inner.g_star > FEAS_TOL:
        logger.warning('Scenario is not manageable: overload %.6g', inner.g_star)
    if args.sample:
        frame = sample_region(grid, region, backend, x, args.sample, seed=cfg.seed)
        sample_path = os.path.join(args.out, 'sample.csv')
        os.makedirs(args.out, exist_ok=True)
        frame.to_csv(sample_path, index=False)
        result['sample'] = {'path': sample_path, 'points': len(frame), 'manageable': int(frame['manageable'].sum())}
        logger.debug('Sampled %d scenarios to %s', len(frame), sample_path)
    report = RunReport(
        command='check',
        case=args.case,
        input_digest=input_digest(args.case),
        config=asdict(cfg),
        result=result,
        timings={'total_s': time.monotonic() - started},
    )
    _emit(report, _report_path(args, 'check'))
    return 0


def cmd_oracle(args) -> int:
    started = time.monotonic()
    cfg, grid, region = _prepare(args)
    ocfg = oracle_config(args)
    if args.x:
        x = check_set_points(grid, load_vector(args.x))
        delta = oracle_flexibility_at(grid, region, x, ocfg)
    else:
        delta, x = oracle_best(grid, region, ocfg)
    result = {'delta_oracle': delta, 'x': x, 'slack': oracle_slack(region, ocfg), 'region': region.kind}
    logger.info('Oracle flexibility %.6g', delta)
    report = RunReport(
        command='oracle',
        case=args.case,
        input_digest=input_digest(args.case),
        config=asdict(ocfg),
        result=result,
        timings={'total_s': time.monotonic() - started},
    )
    _emit(report, _report_path(args, 'oracle'))
    return 0


def cmd_info(args) -> int:
    cfg = build_config(args)
    grid = load_case(args.case, strict=not args.lenient, angle_bound=cfg.angle_bound)
    info = grid_summary(grid)
    info['uniqueness_bound'] = uniqueness_bound(grid, box_from_grid(grid, host_radius=0.0), host_max=cfg.host_max)
    info['regions'] = {name: list(nodes) for name, nodes in grid.regions.items()}
    print(json.dumps(info, indent=2))
    return 0


def toggle_variants(mode: str) -> Dict[str, dict]:
    if mode == 'full':
        return {'full': {}}
    variants = {}
    for flags in product((True, False), repeat=len(TOGGLES)):
        name = ''.join(f"{key.split('_')[1][0].upper()}{int(on)}" for key, on in zip(TOGGLES, flags))
        variants[name] = dict(zip(TOGGLES, flags))
    return variants


def cmd_sweep(args) -> int:
    cfg, grid, region = _prepare(args)
    sweep = args.params_data.get('sweep', {}) or {}
    alpha_primes = args.alpha_primes or sweep.get('alpha_primes', [cfg.alpha_prime])
    repetitions = args.repetitions or sweep.get('repetitions', 1)
    rows = []
    for alpha_prime in alpha_primes:
        for variant, toggles in toggle_variants(args.variants).items():
            for rep in range(repetitions):
                run_cfg = replace(cfg, alpha_prime=float(alpha_prime), seed=cfg.seed + rep, **toggles)
                result = solve_flexibility(grid, region, run_cfg)
                rows.append({
                    'alpha_prime': float(alpha_prime),
                    'variant': variant,
                    'repetition': rep,
                    'delta_guaranteed': result.delta_guaranteed,
                    'delta_optimistic': result.delta_optimistic,
                    'wall_s': result.wall_s,
                    'iterations': result.lower_iterations + result.upper_iterations,
                    'status': result.status,
                })
                logger.info('Sweep alpha_prime=%g variant=%s rep=%d: [%.6g, %.6g] in %.2fs', alpha_prime, variant,
                            rep, result.delta_guaranteed, result.delta_optimistic, result.wall_s)
    frame = pd.DataFrame(rows)
    os.makedirs(args.out, exist_ok=True)
    table_path = os.path.join(args.out, 'sweep.csv')
    frame.to_csv(table_path, index=False)
    summary = frame.pivot_table(index='alpha_prime', columns='variant', values='wall_s', aggfunc=['min', 'max'])
    summary.to_csv(os.path.join(args.out, 'sweep_wall_time.csv'))
    print(summary.to_string())
    logger.debug('Sweep table saved to %s', table_path)
    return 0 if (frame['status'] == 'certified').all() else 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('case', help='JSON case file or directory of CSV tables')
    common.add_argument('--config', default='config.yaml')
    common.add_argument('--params', default='params.yaml')
    common.add_argument('--lenient', action='store_true', help='ignore unknown case-file fields')
    common.add_argument('--region', choices=['box', 'transfer'], default=None)
    common.add_argument('--host-from-box', type=float, default=None, metavar='DELTA',
                        help='transfer host box := hyperbox T(DELTA)')
    common.add_argument('--out', default=None, help='report directory; default output.reports_dir')
    common.add_argument('--seed', type=int, default=None)
    common.add_argument('--time-limit', type=float, default=None)
    common.add_argument('--dump-lp', default=None, metavar='DIR')

    algorithm = argparse.ArgumentParser(add_help=False)
    algorithm.add_argument('--alpha-prime', type=float, default=None)
    algorithm.add_argument('--rel-tol', type=float, default=None)
    algorithm.add_argument('--eps-r0', type=float, default=None)
    algorithm.add_argument('--r-r', type=float, default=None)
    algorithm.add_argument('--no-transformation', action='store_true')
    algorithm.add_argument('--no-dropping', action='store_true')
    algorithm.add_argument('--no-auxiliary', action='store_true')
    algorithm.add_argument('--single-thread', action='store_true')

    parser = argparse.ArgumentParser(prog='flexindex', description='Flexibility index of DC power grids')
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest='command', required=True)

    solve = sub.add_parser('solve', parents=[common, algorithm], help='maximize the flexibility index')
    solve.add_argument('--no-track', action='store_true', help='skip dvclive tracking')
    solve.set_defaults(handler=cmd_solve)

    evaluate = sub.add_parser('evaluate', parents=[common, algorithm], help='flexibility of fixed set-points')
    evaluate.add_argument('--x', required=True, help='JSON set-points or a solve report')
    evaluate.set_defaults(handler=cmd_evaluate)

    check = sub.add_parser('check', parents=[common], help='manageability of a single scenario')
    check.add_argument('--x', required=True)
    check.add_argument('--y', default=None, help='JSON scenario offsets; default the forecast')
    check.add_argument('--sample', type=int, default=None, metavar='N', help='write N-per-axis sample CSV')
    check.set_defaults(handler=cmd_check)

    oracle = sub.add_parser('oracle', parents=[common], help='brute-force flexibility on tiny cases')
    oracle.add_argument('--x', default=None)
    oracle.set_defaults(handler=cmd_oracle)

    info = sub.add_parser('info', parents=[common], help='instance properties')
    info.set_defaults(handler=cmd_info)

    sweep = sub.add_parser('sweep', parents=[common, algorithm], help='alpha and toggle study')
    sweep.add_argument('--alpha-primes', type=float, nargs='+', default=None)
    sweep.add_argument('--repetitions', type=int, default=None)
    sweep.add_argument('--variants', choices=['full', 'toggles'], default='full')
    sweep.set_defaults(handler=cmd_sweep)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (SolverFailure, BackendUnavailableError) as e:
        logger.error('Solver error: %s', e)
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (InputError, InfeasibleBaseCase, OracleCapExceeded, FileNotFoundError, yaml.YAMLError) as e:
        logger.error('Input error: %s', e)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.exception('Internal error: %s', e)
        print(f"internal error: {e}", file=sys.stderr)
        return 2
