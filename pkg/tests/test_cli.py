import json
import os

import pandas as pd
import pytest

from conftest import case_path
from flexindex import __version__, tracking
from flexindex.cli import RunReport, build_parser, input_digest, load_vector, main, sample_points, toggle_variants
from flexindex.errors import CaseFileError
from flexindex.grid_model import parse_grid
from flexindex.uncertainty_regions import box_from_grid

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIG = os.path.join(ROOT, 'config.yaml')
PARAMS = os.path.join(ROOT, 'params.yaml')

requires_solver = pytest.mark.requires_solver


def run(command, case, out, *extra):
    return main([command, case_path(case), '--config', CONFIG, '--params', PARAMS, '--out', str(out), *extra])


def write_json(path, data):
    path.write_text(json.dumps(data))
    return str(path)


def read_report(out, name):
    with open(os.path.join(out, f"{name}.json")) as file:
        return json.load(file)


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(['--version'])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_info(tmp_path, capsys):
    assert run('info', 'motivating_example.json', tmp_path) == 0
    info = json.loads(capsys.readouterr().out)
    assert info['nodes'] == 5
    assert info['bus_merges'] == 1
    assert info['uniqueness_bound'] == pytest.approx(9.5 / 3.0)
    assert info['regions'] == {'A': ['C1'], 'B': ['C2']}


def test_info_from_tables(tmp_path, capsys):
    assert run('info', 'three_ring_tables', tmp_path) == 0
    info = json.loads(capsys.readouterr().out)
    assert info['critical_edges'] == 3


def test_oracle_report(tmp_path):
    assert run('oracle', 'two_node.json', tmp_path) == 0
    report = read_report(tmp_path, 'oracle')
    assert report['command'] == 'oracle'
    assert report['schema'] == 1
    assert report['result']['delta_oracle'] == pytest.approx(3.0, abs=report['result']['slack'])
    assert report['input_digest'] == input_digest(case_path('two_node.json'))


def test_transfer_without_regions_is_input_error(tmp_path):
    assert run('oracle', 'two_node.json', tmp_path, '--region', 'transfer') == 1


def test_unbalanced_set_points_rejected(tmp_path):
    x = write_json(tmp_path / 'x.json', {'g1': 3.0})
    assert run('evaluate', 'two_node.json', tmp_path, '--x', x) == 1


def test_unknown_generator_rejected(tmp_path):
    x = write_json(tmp_path / 'x.json', {'g1': 2.0, 'g9': 0.0})
    assert run('oracle', 'two_node.json', tmp_path, '--x', x) == 1


def test_missing_case_file(tmp_path):
    assert main(['info', str(tmp_path / 'absent.json'), '--config', CONFIG, '--params', PARAMS]) == 1


def test_invalid_setting_is_input_error(tmp_path):
    x = write_json(tmp_path / 'x.json', {'g1': 2.0})
    assert run('evaluate', 'two_node.json', tmp_path, '--x', x, '--rel-tol', '-1') == 1


def test_internal_error_is_not_input_error(tmp_path, monkeypatch):
    def broken(grid):
        raise ValueError('summary out of sync with the grid')

    monkeypatch.setattr('flexindex.cli.grid_summary', broken)
    assert run('info', 'two_node.json', tmp_path) == 2


def test_load_vector_accepts_reports(tmp_path):
    path = write_json(tmp_path / 'solve.json', {'command': 'solve', 'result': {'x': {'g1': 2}}})
    assert load_vector(path) == {'g1': 2.0}
    broken = tmp_path / 'broken.json'
    broken.write_text('{"g1": ')
    with pytest.raises(CaseFileError):
        load_vector(str(broken))


def test_report_rejects_empty_interval():
    with pytest.raises(ValueError, match='empty'):
        RunReport(command='solve', case='c', input_digest='d', config={},
                  result={'delta_guaranteed': 2.0, 'delta_optimistic': 1.0})


def test_sample_points_per_axis():
    grid = parse_grid(case_path('two_node.json'))
    points = sample_points(grid, box_from_grid(grid), 5)
    assert [p['n2'] for p in points] == [-8.0, -4.0, 0.0, 4.0, 8.0]
    assert all(p['n1'] == 0.0 for p in points)


def test_toggle_variants():
    variants = toggle_variants('toggles')
    assert len(variants) == 8
    assert variants['T1D0A1'] == {'use_transformation': True, 'use_dropping': False, 'use_auxiliary': True}
    assert toggle_variants('full') == {'full': {}}


@requires_solver
def test_solve_writes_report_and_log(tmp_path):
    assert run('solve', 'two_node.json', tmp_path, '--no-track', '--single-thread') == 0
    report = read_report(tmp_path, 'solve')
    result = report['result']
    assert result['certified']
    assert result['delta_guaranteed'] <= 3.0 + 1e-5 <= result['delta_optimistic'] + 2e-5
    assert result['objective_upper_bound'] == -result['delta_guaranteed']
    assert os.path.exists(report['iteration_log'])


@requires_solver
def test_solve_time_limit_exit_code(tmp_path):
    assert run('solve', 'two_node.json', tmp_path, '--no-track', '--single-thread', '--time-limit', '0.001') == 3


@requires_solver
def test_evaluate_from_solve_report(tmp_path):
    x = write_json(tmp_path / 'x.json', {'result': {'x': {'g1': 2.0}}})
    assert run('evaluate', 'two_node.json', tmp_path, '--x', x) == 0
    result = read_report(tmp_path, 'evaluate')['result']
    assert 3.0 * 0.975 - 1e-6 <= result['delta_wc_relax'] <= 3.0 + 1e-6
    assert result['certified']


@requires_solver
def test_check_with_sample(tmp_path):
    x = write_json(tmp_path / 'x.json', {'g1': 2.0})
    y = write_json(tmp_path / 'y.json', {'n2': -4.0})
    assert run('check', 'two_node.json', tmp_path, '--x', x, '--y', y, '--sample', '5') == 0
    result = read_report(tmp_path, 'check')['result']
    assert not result['manageable']
    assert result['g_star'] == pytest.approx(0.2, abs=1e-6)
    assert result['control'] == 'merge:none'
    frame = pd.read_csv(tmp_path / 'sample.csv')
    assert list(frame.columns) == ['y_n1', 'y_n2', 'h', 'manageable']
    assert frame['manageable'].tolist() == [0, 0, 1, 1, 0]


class RecordingLive:
    def __init__(self, save_dvc_exp=True):
        self.metrics, self.params = {}, {}
        RecordingLive.last = self

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def log_metric(self, name, val):
        self.metrics[name] = val

    def log_params(self, params):
        self.params.update(params)


def test_log_run_sends_bounds(monkeypatch):
    monkeypatch.setattr(tracking, 'Live', RecordingLive)
    result = {'delta_guaranteed': 2.9, 'delta_optimistic': 3.0, 'gap': 0.1, 'wall_s': 1.5, 'x': {'g1': 2.0}}
    assert tracking.log_run(result, {'alpha_prime': 0.5})
    assert RecordingLive.last.metrics == {'delta_guaranteed': 2.9, 'delta_optimistic': 3.0, 'gap': 0.1, 'wall_s': 1.5}
    assert RecordingLive.last.params == {'alpha_prime': 0.5}


def test_log_run_never_fails_a_solve(monkeypatch):
    def broken(**kwargs):
        raise RuntimeError('no repository')

    monkeypatch.setattr(tracking, 'Live', broken)
    assert not tracking.log_run({'delta_guaranteed': 1.0}, {})
