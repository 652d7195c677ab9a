import pytest

from conftest import ORACLE_SEEDS, balanced_set_points, random_case
from flexindex.formulation import ControlAssignment
from flexindex.grid_model import grid_from_dict
from flexindex.oracle import oracle_flexibility_at, oracle_min_violation, oracle_slack
from flexindex.subproblems import base_case_violation, evaluate_flexibility_at, inner_min, worst_case
from flexindex.uncertainty_regions import box_from_grid

pytestmark = pytest.mark.requires_solver

BALANCED = {'g1': 2.0}


def test_inner_min_overload(two_node, two_node_box, backend):
    result = inner_min(two_node, two_node_box, backend, BALANCED, {'n2': -4.0})
    assert result.g_star == pytest.approx(0.2, abs=1e-6)
    assert result.flows['e1'] == pytest.approx(6.0, abs=1e-6)


def test_inner_min_scenario_value(two_node, two_node_box, backend):
    result = inner_min(two_node, two_node_box, backend, BALANCED, {'n2': -4.0}, alpha=0.5, delta=3.0)
    assert result.h == pytest.approx(4.0)
    assert result.value == pytest.approx(-0.5, abs=1e-6)


def test_inner_min_rejects_unabsorbable_scenario(two_node, two_node_box, backend):
    with pytest.raises(ValueError, match='cannot absorb'):
        inner_min(two_node, two_node_box, backend, BALANCED, {'n2': -9.0})


def test_inner_min_uses_merge(merge_reroute, backend):
    region = box_from_grid(merge_reroute)
    result = inner_min(merge_reroute, region, backend, {'g1': 6.0}, {'c': -1.0})
    assert result.g_star == pytest.approx(14.0 / 30.0 - 1.0, abs=1e-6)
    assert result.z_star == ControlAssignment('dc')
    without, _ = oracle_min_violation(merge_reroute, {'g1': 6.0}, {'c': -1.0}, merges=[None])
    assert without > 0


def test_base_case_violation(two_node, two_node_box, backend, merge_reroute):
    assert base_case_violation(two_node, two_node_box, backend, BALANCED) == pytest.approx(-0.6, abs=1e-6)
    region = box_from_grid(merge_reroute)
    assert base_case_violation(merge_reroute, region, backend, {'g1': 6.0}) == pytest.approx(6.0 / 6.5 - 1.0,
                                                                                           abs=1e-6)


def test_worst_case_feasible_at_true_flexibility(two_node, two_node_box, backend, fast_config):
    outcome = worst_case(two_node, two_node_box, backend, fast_config, BALANCED, 3.0, 0.5)
    assert outcome.feasible()
    assert outcome.value <= 1e-6


def test_worst_case_finds_overload_beyond(two_node, two_node_box, backend, fast_config):
    outcome = worst_case(two_node, two_node_box, backend, fast_config, BALANCED, 4.0, 0.5)
    assert not outcome.feasible()
    assert outcome.value == pytest.approx(1.0 / 7.0, abs=1e-4)
    assert outcome.y_star['n2'] < -3.0
    assert outcome.certified


def test_worst_case_grows_control_pool(merge_reroute, backend, fast_config):
    region = box_from_grid(merge_reroute)
    outcome = worst_case(merge_reroute, region, backend, fast_config, {'g1': 6.0}, region.host_radius, 0.5)
    assert outcome.feasible()
    assert ControlAssignment('dc') in outcome.inner_pool


def test_auxiliary_evaluation_is_pessimistic(two_node, two_node_box, backend, fast_config):
    result = evaluate_flexibility_at(two_node, two_node_box, backend, fast_config, BALANCED)
    assert 3.0 * (1 - fast_config.aux_tol) - 1e-6 <= result.delta_wc_relax <= 3.0 + 1e-6
    assert result.certified
    assert result.y_witness['n2'] < -2.9


def test_auxiliary_evaluation_manageable_host(merge_reroute, backend, fast_config):
    region = box_from_grid(merge_reroute)
    result = evaluate_flexibility_at(merge_reroute, region, backend, fast_config, {'g1': 6.0})
    assert result.delta_wc_relax == pytest.approx(region.host_radius)
    assert result.y_witness is None


@pytest.mark.slow
@pytest.mark.parametrize('seed', ORACLE_SEEDS)
def test_auxiliary_evaluation_brackets_oracle(seed, backend, fast_config):
    grid = grid_from_dict(random_case(seed))
    region = box_from_grid(grid)
    x = balanced_set_points(grid)
    reference = oracle_flexibility_at(grid, region, x)
    slack = oracle_slack(region)
    result = evaluate_flexibility_at(grid, region, backend, fast_config, x)
    assert result.delta_wc_relax <= reference + slack
    assert result.delta_wc_relax >= (1 - fast_config.aux_tol) * reference - slack


def test_auxiliary_gap_left_open_is_not_certified(merge_reroute, backend, fast_config):
    region = box_from_grid(merge_reroute)
    config = fast_config.with_overrides(aux_eps0=1e-7)
    result = evaluate_flexibility_at(merge_reroute, region, backend, config, {'g1': 6.0})
    assert not result.certified
    assert result.upper - result.delta_wc_relax > config.aux_tol * result.upper
