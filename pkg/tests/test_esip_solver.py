import itertools
import json
import threading

import pytest

from conftest import ORACLE_SEEDS, random_case
from flexindex.esip_solver import (
    BoundStore, DiscretizationPool, FlexibilitySolver, drop_redundant, gap_closed, solve_flexibility,
)
from flexindex.grid_model import grid_from_dict
from flexindex.oracle import oracle_best, oracle_flexibility, oracle_flexibility_at, oracle_slack
from flexindex.params import Config
from flexindex.subproblems import worst_case
from flexindex.uncertainty_regions import box_from_grid, transfer_from_grid

# g1 at its 3 MW ceiling leaves L3 carrying 0.75 + 2 delta when L2 is closed
MOTIVATING_FLEXIBILITY = 17.0 / 8.0


def test_pool_skips_duplicates():
    pool = DiscretizationPool()
    assert pool.add({'n2': -3.0}, 3.0, 'lower', 1)
    assert not pool.add({'n2': -3.0 + 1e-12}, 3.0, 'upper', 1)
    assert pool.add({'n2': 3.0}, 3.0, 'upper', 1)
    assert len(pool) == 2


def test_dropping_is_strict_and_reversible():
    pool = DiscretizationPool()
    pool.add({'n': 1.0}, 1.0, 'lower', 1)
    pool.add({'n': 2.0}, 2.0, 'lower', 2)
    pool.add({'n': 5.0}, 5.0, 'lower', 3)
    assert drop_redundant(pool, 2.0) == 1
    assert [e.h for e in pool.active()] == [1.0, 2.0]
    assert drop_redundant(pool, 6.0) == 0
    assert pool.active_count == 3
    assert drop_redundant(pool, 0.5, region_kind='transfer') == 0
    assert pool.active_count == 3


def test_gap_closed():
    assert gap_closed(3.0, 2.9, 0.05)
    assert not gap_closed(3.0, 2.5, 0.05)
    assert gap_closed(5e-4, 4.5e-4, 0.05)
    assert not gap_closed(5e-4, 2e-4, 0.05)


def test_guaranteed_takes_the_maximum():
    store = BoundStore(8.0, 0.05)
    assert store.update_guaranteed(2.5, {'g1': 1.0}, 'upper bounding')
    assert store.update_guaranteed(2.9, {'g1': 2.0}, 'auxiliary')
    assert not store.update_guaranteed(2.0, {'g1': 3.0}, 'auxiliary')
    state = store.snapshot()
    assert state.delta_guaranteed == 2.9
    assert state.incumbent_x == {'g1': 2.0}
    assert state.guaranteed_source == 'auxiliary'


def test_bounds_are_clipped_to_stay_ordered():
    store = BoundStore(8.0, 0.05)
    store.update_guaranteed(3.0, {'g1': 2.0}, 'lower bounding')
    assert store.update_optimistic(2.0)
    assert store.snapshot().delta_optimistic == 3.0
    assert not store.update_optimistic(4.0)
    store.update_guaranteed(5.0, {'g1': 2.0}, 'auxiliary')
    assert store.snapshot().delta_guaranteed == 3.0


def test_converged_needs_incumbent():
    store = BoundStore(0.0, 0.05)
    assert not store.converged(0.05)
    store.update_guaranteed(0.0, {'g1': 2.0}, 'base case')
    assert store.converged(0.05)


def test_iteration_log_is_json_lines(tmp_path):
    path = tmp_path / 'logs' / 'iterations.jsonl'
    store = BoundStore(8.0, 0.05, log_path=str(path))
    store.record('lower', 1, 0.0, 8.0, 0.14, 0.0, 'scenario added')
    store.update_optimistic(3.0)
    store.record('upper', 1, 0.05, 2.9, -0.01, 0.0, 'certified')
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r['procedure'] for r in rows] == ['lower', 'upper']
    assert rows[1]['objective_lower_bound'] == -3.0
    assert rows[1]['delta_candidate'] == 2.9


@pytest.mark.requires_solver
class TestUpperLevel:
    def test_first_call_reaches_host(self, two_node, two_node_box, backend, fast_config):
        solver = FlexibilitySolver(two_node, two_node_box, fast_config, backend=backend)
        candidate = solver.upper_level(0.0)
        assert candidate.delta == pytest.approx(8.0, abs=1e-6)
        assert candidate.x['g1'] == pytest.approx(2.0, abs=1e-6)

    def test_transformed_corner_gives_flexibility(self, two_node, two_node_box, backend, fast_config):
        solver = FlexibilitySolver(two_node, two_node_box, fast_config, backend=backend)
        solver.store.add_scenario({'n1': 0.0, 'n2': -8.0}, 8.0, 'lower', 1)
        assert solver.upper_level(0.0).delta == pytest.approx(3.0, abs=1e-5)

    def test_untransformed_corner_is_weak(self, two_node, two_node_box, backend, fast_config):
        config = fast_config.with_overrides(use_transformation=False)
        solver = FlexibilitySolver(two_node, two_node_box, config, backend=backend)
        solver.store.add_scenario({'n1': 0.0, 'n2': -8.0}, 8.0, 'lower', 1)
        assert solver.upper_level(0.0).delta == pytest.approx(8.0, abs=1e-5)

    def test_restriction_can_make_upper_level_infeasible(self, two_node, two_node_box, backend, fast_config):
        solver = FlexibilitySolver(two_node, two_node_box, fast_config, backend=backend)
        assert solver.upper_level(0.7) is None

    def test_transformation_disabled_for_transfer(self, three_ring, backend, fast_config):
        solver = FlexibilitySolver(three_ring, transfer_from_grid(three_ring), fast_config, backend=backend)
        assert not solver.transform
        assert not solver.dropping
        assert solver.region.host_radius == pytest.approx(1.0, abs=1e-6)


def _assert_interval(result, expected, slack):
    assert result.delta_guaranteed <= result.delta_optimistic + 1e-9
    assert result.delta_guaranteed <= expected + slack
    assert expected <= result.delta_optimistic + slack


@pytest.mark.requires_solver
class TestSolveFlexibility:
    def test_two_node(self, two_node, two_node_box, fast_config, tmp_path):
        log_path = tmp_path / 'iterations.jsonl'
        result = solve_flexibility(two_node, two_node_box, fast_config, log_path=str(log_path))
        assert result.certified
        assert result.status == 'certified'
        _assert_interval(result, 3.0, 1e-5)
        assert result.gap <= 0.05 * 3.0 + 1e-9
        assert result.x['g1'] == pytest.approx(2.0, abs=1e-6)
        assert log_path.read_text().count('\n') == len(result.iterations)
        assert result.to_dict()['objective_upper_bound'] == -result.delta_guaranteed

    def test_two_node_parallel(self, two_node, two_node_box, fast_config):
        result = solve_flexibility(two_node, two_node_box, fast_config.with_overrides(single_thread=False))
        assert result.certified
        _assert_interval(result, 3.0, 1e-5)

    def test_merge_control_reaches_host(self, merge_reroute, fast_config):
        region = box_from_grid(merge_reroute)
        result = solve_flexibility(merge_reroute, region, fast_config)
        assert result.certified
        _assert_interval(result, 4.0, 1e-5)

    def test_three_ring_box(self, three_ring, fast_config):
        result = solve_flexibility(three_ring, box_from_grid(three_ring), fast_config)
        assert result.certified
        _assert_interval(result, 0.75, 1e-5)

    def test_three_ring_transfer(self, three_ring, fast_config):
        result = solve_flexibility(three_ring, transfer_from_grid(three_ring), fast_config)
        assert result.certified
        assert result.region == 'transfer'
        _assert_interval(result, 0.5, 1e-4)

    def test_time_limit_returns_best_effort(self, two_node, two_node_box):
        result = solve_flexibility(two_node, two_node_box, Config(single_thread=True, time_limit=0.001))
        assert not result.certified
        assert result.status == 'time_limit'
        assert result.delta_guaranteed <= result.delta_optimistic

    @pytest.mark.parametrize('flags', list(itertools.product((True, False), repeat=3)))
    def test_toggles_agree(self, two_node, two_node_box, fast_config, flags):
        transformation, dropping, auxiliary = flags
        config = fast_config.with_overrides(use_transformation=transformation, use_dropping=dropping,
                                            use_auxiliary=auxiliary)
        result = solve_flexibility(two_node, two_node_box, config)
        assert result.certified
        _assert_interval(result, 3.0, 0.05 * 3.0)

    @pytest.mark.parametrize('case', ['three_ring', 'merge_reroute'])
    def test_single_thread_runs_are_repeatable(self, case, fast_config, tmp_path, request):
        grid = request.getfixturevalue(case)
        region = box_from_grid(grid)
        logs = []
        for run in ('first', 'second'):
            path = tmp_path / f"{run}.jsonl"
            solve_flexibility(grid, region, fast_config, log_path=str(path))
            rows = [json.loads(line) for line in path.read_text().splitlines()]
            logs.append([{k: v for k, v in row.items() if k != 'wall_ms'} for row in rows])
        assert logs[0]
        assert logs[0] == logs[1]

    @pytest.mark.parametrize('case', ['two_node', 'three_ring', 'merge_reroute'])
    def test_guaranteed_value_is_manageable(self, case, backend, fast_config, request):
        grid = request.getfixturevalue(case)
        solver = FlexibilitySolver(grid, box_from_grid(grid), fast_config, backend=backend)
        result = solver.solve()
        assert result.certified
        outcome = worst_case(grid, solver.region, backend, fast_config, result.x, result.delta_guaranteed,
                             solver.alpha)
        assert outcome.feasible(tol=fast_config.wc_tol)
        reference = oracle_flexibility_at(grid, solver.region, result.x)
        assert result.delta_guaranteed <= reference + oracle_slack(solver.region)


@pytest.mark.requires_solver
def test_worker_threads_get_their_own_backend(two_node, two_node_box, backend, fast_config):
    solver = FlexibilitySolver(two_node, two_node_box, fast_config.with_overrides(single_thread=False),
                               backend=backend)
    seen = []

    def grab():
        seen.append((solver.backend, solver.backend))

    for _ in range(2):
        worker = threading.Thread(target=grab)
        worker.start()
        worker.join()
    assert solver.backend is backend
    (first, again), (second, _) = seen
    assert first is again
    assert first is not backend and second is not backend
    assert first is not second


@pytest.mark.slow
@pytest.mark.requires_solver
def test_motivating_example_matches_oracle(motivating, fast_config):
    region = box_from_grid(motivating)
    result = solve_flexibility(motivating, region, fast_config)
    oracle = oracle_flexibility(motivating, region)
    slack = oracle_slack(region)
    assert result.certified
    _assert_interval(result, MOTIVATING_FLEXIBILITY, slack)
    assert oracle == pytest.approx(MOTIVATING_FLEXIBILITY, abs=slack)


@pytest.mark.slow
def test_motivating_example_reference_value(motivating):
    region = box_from_grid(motivating)
    best, x = oracle_best(motivating, region)
    assert best == pytest.approx(MOTIVATING_FLEXIBILITY, abs=oracle_slack(region))
    assert x['g1'] + x['g2'] == pytest.approx(1.0)


@pytest.mark.slow
@pytest.mark.requires_solver
@pytest.mark.parametrize('seed', ORACLE_SEEDS)
def test_random_grid_matches_oracle(seed, fast_config):
    grid = grid_from_dict(random_case(seed))
    region = box_from_grid(grid)
    result = solve_flexibility(grid, region, fast_config)
    assert result.certified
    best, _ = oracle_best(grid, region)
    at_incumbent = oracle_flexibility_at(grid, region, result.x)
    slack = 0.05 * max(best, at_incumbent) + oracle_slack(region)
    assert result.delta_guaranteed <= at_incumbent + slack
    assert best <= result.delta_optimistic + slack


@pytest.mark.slow
@pytest.mark.requires_solver
@pytest.mark.parametrize('seed', ORACLE_SEEDS[:5])
def test_random_grid_toggles_overlap(seed, fast_config):
    grid = grid_from_dict(random_case(seed))
    region = box_from_grid(grid)
    intervals = []
    for flags in itertools.product((True, False), repeat=3):
        config = fast_config.with_overrides(**dict(zip(('use_transformation', 'use_dropping', 'use_auxiliary'),
                                                       flags)))
        result = solve_flexibility(grid, region, config)
        assert result.certified
        intervals.append((result.delta_guaranteed, result.delta_optimistic))
    highest_low = max(low for low, _ in intervals)
    lowest_high = min(high for _, high in intervals)
    assert highest_low <= lowest_high * (1 + fast_config.rel_tol) + 1e-6
