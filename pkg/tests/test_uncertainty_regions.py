import math

import numpy as np
import pytest

from flexindex.errors import CaseFileError
from flexindex.uncertainty_regions import (
    AlphaScaling, HyperboxRegion, TransferRegion, box_from_grid, compute_delta_norm, h_box, h_transfer,
    scenario_value_at, transfer_from_grid, transfer_host_from_box, transfer_host_radius,
)

requires_solver = pytest.mark.requires_solver


def test_box_corners(motivating):
    region = box_from_grid(motivating)
    lo, hi = region.bounds(1.0)
    assert lo['C2'] == -2.0
    assert hi['C2'] == 1.0
    assert lo['G1'] == hi['G1'] == 0.0
    assert region.contains({'C1': 0.5, 'C2': -1.9}, 1.0)
    assert not region.contains({'C1': 0.5, 'C2': -2.1}, 1.0)


def test_box_rejects_negative_scaling():
    with pytest.raises(ValueError, match='delta_minus'):
        HyperboxRegion(y0={'n': 0.0}, delta_minus={'n': -1.0}, delta_plus={'n': 1.0}, host_radius=1.0)


def test_box_h(two_node_box):
    assert h_box(two_node_box, {'n2': -3.0}) == pytest.approx(3.0)
    assert h_box(two_node_box, {'n2': 0.5}) == pytest.approx(0.5)
    assert h_box(two_node_box, {'n1': 0.1, 'n2': 0.0}) == math.inf


def test_box_h_uses_asymmetric_scaling(motivating):
    region = box_from_grid(motivating)
    assert h_box(region, {'C1': 0.0, 'C2': -3.0}) == pytest.approx(1.5)
    assert h_box(region, {'C1': 0.0, 'C2': 1.5}) == pytest.approx(1.5)


def test_host_radius_from_load_distribution(two_node_box, motivating):
    assert two_node_box.host_radius == pytest.approx(8.0)
    assert box_from_grid(motivating, host_max=2.0).host_radius == pytest.approx(2.0)


def test_transfer_region_validation():
    with pytest.raises(ValueError, match='overlap'):
        TransferRegion(region_a=('n1',), region_b=('n1',), y_lo={}, y_hi={})
    with pytest.raises(ValueError, match='contain the forecast'):
        TransferRegion(region_a=('n1',), region_b=('n2',), y_lo={'n1': 0.5}, y_hi={'n1': 1.0})


def test_transfer_needs_regions(two_node):
    with pytest.raises(CaseFileError, match="region 'A'"):
        transfer_from_grid(two_node)


def test_transfer_value(three_ring):
    region = transfer_from_grid(three_ring)
    assert region.region_a == ('n2',)
    assert h_transfer(region, three_ring, {'g1': 2.0}, {'n2': 1.0, 'n3': -0.5}) == pytest.approx(0.5)
    assert h_transfer(region, three_ring, {'g1': 2.0}, {'n2': -0.2, 'n3': -0.5}) == pytest.approx(-0.2)


def test_transfer_host_from_box(three_ring):
    box = box_from_grid(three_ring)
    region = transfer_host_from_box(three_ring, box, 0.5)
    lo, hi = region.host_bounds()
    assert lo['n2'] == pytest.approx(-0.5)
    assert hi['n3'] == pytest.approx(0.5)
    assert lo['n1'] == hi['n1'] == 0.0


def test_alpha_scaling():
    assert AlphaScaling(0.5, 2.0).alpha == pytest.approx(0.25)
    with pytest.raises(ValueError):
        AlphaScaling(0.0)


def test_scenario_value(two_node_box, three_ring):
    assert scenario_value_at(two_node_box, 0.5, 3.0, 1.0, -0.2) == pytest.approx(-0.2)
    assert scenario_value_at(two_node_box, 0.5, 3.0, 4.0, 0.2) == pytest.approx(-0.5)
    transfer = transfer_from_grid(three_ring)
    assert scenario_value_at(transfer, 1.0, 2.0, -0.3, 0.4) == pytest.approx(-0.3)


def test_delta_norm_is_one_for_box(two_node_box, two_node, fast_config):
    assert compute_delta_norm(two_node, two_node_box, None, fast_config) == 1.0


@requires_solver
def test_transfer_host_radius_and_norm(three_ring, backend, fast_config):
    region = transfer_from_grid(three_ring)
    assert transfer_host_radius(three_ring, region, backend, fast_config) == pytest.approx(1.0, abs=1e-6)
    assert compute_delta_norm(three_ring, region, backend, fast_config) == pytest.approx(0.75, abs=1e-6)


SKEWED = HyperboxRegion(y0={'a': 1.0, 'b': -2.0, 'c': 0.0}, delta_minus={'a': 1.0, 'b': 2.0, 'c': 0.0},
                        delta_plus={'a': 0.5, 'b': 1.0, 'c': 0.0}, host_radius=5.0)


def test_box_h_agrees_with_membership():
    rng = np.random.default_rng(11)
    points = rng.uniform([-4.0, -9.0], [4.0, 4.0], size=(10_000, 2))
    deltas = rng.uniform(0.0, 5.0, size=10_000)
    pinned_moves = rng.random(10_000) < 0.1
    for (a, b), delta, moved in zip(points, deltas, pinned_moves):
        y = {'a': float(a), 'b': float(b), 'c': 0.3 if moved else 0.0}
        assert SKEWED.contains(y, float(delta), tol=0.0) == (h_box(SKEWED, y) <= delta)


def test_box_h_is_positively_homogeneous():
    rng = np.random.default_rng(12)
    for (a, b), scale in zip(rng.uniform(-3.0, 3.0, size=(1000, 2)), rng.uniform(0.01, 5.0, size=1000)):
        offset = {'a': float(a), 'b': float(b), 'c': 0.0}
        y = {n: SKEWED.y0[n] + d for n, d in offset.items()}
        scaled = {n: SKEWED.y0[n] + scale * d for n, d in offset.items()}
        assert h_box(SKEWED, scaled) == pytest.approx(scale * h_box(SKEWED, y), rel=1e-9, abs=1e-12)
