import pytest

from flexindex.errors import InfeasibleBaseCase, OracleCapExceeded
from flexindex.grid_model import grid_from_dict, serialize_grid
from flexindex.oracle import (
    OracleConfig, check_caps, nodal_injections, oracle_best, oracle_flexibility_at, oracle_manageable,
    oracle_min_violation, oracle_slack, transfer_value,
)
from flexindex.uncertainty_regions import box_from_grid, transfer_from_grid

BALANCED = {'g1': 2.0}


def test_config_validation():
    with pytest.raises(ValueError, match='x_grid_resolution'):
        OracleConfig(x_grid_resolution=0.0)
    cfg = OracleConfig.from_dict({'y_grid_resolution': 0.1, 'unrelated': 3})
    assert cfg.y_grid_resolution == 0.1


def test_min_violation_two_node(two_node):
    g, merge = oracle_min_violation(two_node, BALANCED, {'n2': -4.0})
    assert g == pytest.approx(0.2)
    assert merge is None


def test_unabsorbable_scenario(two_node):
    assert nodal_injections(two_node, BALANCED, {'n2': -9.0}) is None
    assert oracle_min_violation(two_node, BALANCED, {'n2': -9.0})[0] == float('inf')


@pytest.mark.parametrize('y, expected', [(-3.0, True), (-3.01, False), (3.0, True)])
def test_manageable_boundary(two_node, y, expected):
    assert oracle_manageable(two_node, BALANCED, {'n2': y}) is expected


def test_merge_choice(merge_reroute):
    x = {'g1': 6.0}
    g, merge = oracle_min_violation(merge_reroute, x, {'c': -1.0})
    assert merge == 'dc'
    assert g == pytest.approx(14.0 / 30.0 - 1.0)
    without, _ = oracle_min_violation(merge_reroute, x, {'c': -1.0}, merges=[None])
    assert without == pytest.approx(7.0 / 6.5 - 1.0)


@pytest.mark.parametrize('y, expected', [(0.0, -0.25), (-2.0, 0.25 / 3.0)])
def test_phase_shifter_saturates(pst_line, y, expected):
    g, _ = oracle_min_violation(pst_line, {'g1': 4.0}, {'n2': y})
    assert g == pytest.approx(expected, abs=1e-9)


def test_symmetric_ring(three_ring):
    a, _ = oracle_min_violation(three_ring, BALANCED, {'n2': 0.7, 'n3': -0.4})
    b, _ = oracle_min_violation(three_ring, BALANCED, {'n2': -0.4, 'n3': 0.7})
    assert a == pytest.approx(b)


def test_transfer_value(three_ring):
    region = transfer_from_grid(three_ring)
    assert transfer_value(three_ring, region, BALANCED, {'n2': 1.0, 'n3': -0.5}) == pytest.approx(0.5)
    assert transfer_value(three_ring, region, BALANCED, {'n2': -0.2, 'n3': -0.5}) == pytest.approx(-0.2)


def test_flexibility_at_two_node(two_node, two_node_box):
    value = oracle_flexibility_at(two_node, two_node_box, BALANCED)
    assert value == pytest.approx(3.0, abs=oracle_slack(two_node_box))
    assert value <= 3.0


def test_flexibility_at_three_ring(three_ring):
    region = box_from_grid(three_ring)
    assert oracle_flexibility_at(three_ring, region, BALANCED) == pytest.approx(0.75, abs=oracle_slack(region))


def test_best_set_point(two_node, two_node_box):
    value, x = oracle_best(two_node, two_node_box)
    assert x == {'g1': pytest.approx(2.0)}
    assert value == pytest.approx(3.0, abs=oracle_slack(two_node_box))


def test_caps(merge_reroute, pst_line):
    with pytest.raises(OracleCapExceeded):
        check_caps(merge_reroute, OracleConfig(max_regimes=0))
    with pytest.raises(OracleCapExceeded):
        check_caps(pst_line, OracleConfig(max_combinations=4))
    check_caps(pst_line, OracleConfig())


def test_infeasible_base_case(two_node):
    data = serialize_grid(two_node)
    data['edges'][0]['limit'] = 1.0
    grid = grid_from_dict(data)
    with pytest.raises(InfeasibleBaseCase):
        oracle_best(grid, box_from_grid(grid))
