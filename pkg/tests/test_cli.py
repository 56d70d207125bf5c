"""Test the command line tool."""
import json
from unittest import mock

import numpy as np
import pytest

from strh2 import command_line
from strh2.bench import gen_msd_chain, gen_random_stable
from strh2.sysmodel import SecondOrderROM, StateSpaceFOM, load_model, save_model
from strh2.util import OptimizationFailed


@pytest.fixture
def first_order(tmp_path):
    """Return the path of H(s) = 1/(s + 1)."""
    path = tmp_path / 'first.json'
    save_model(StateSpaceFOM([[1.0]], [[-1.0]], [[1.0]], [[1.0]]), path)
    return str(path)


@pytest.fixture
def random_fom(tmp_path):
    """Return the path of a four-state random model."""
    path = tmp_path / 'random.json'
    save_model(gen_random_stable(4, seed=2), path)
    return str(path)


def run(args):
    """Run the tool and return its exit code."""
    try:
        command_line(args)
    except SystemExit as e:
        return e.code
    return 0


def test_h2norm(first_order, capsys):
    """Confirm quadrature and Gramian norms of 1/(s+1)."""
    assert run(['h2norm', first_order]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result['h2_norm_quadrature'] == pytest.approx(np.sqrt(0.5), rel=1e-8)
    assert result['h2_norm_gramian'] == pytest.approx(np.sqrt(0.5))
    assert result['config']['command'] == 'h2norm'
    assert 'created' in result


def test_h2norm_unstable(tmp_path):
    """Confirm unstable models exit with status 3."""
    path = tmp_path / 'unstable.json'
    save_model(StateSpaceFOM([[1.0]], [[0.5]], [[1.0]], [[1.0]]), path)
    assert run(['h2norm', str(path)]) == 3


def test_missing_file(tmp_path):
    """Confirm unreadable input exits with status 2."""
    assert run(['h2norm', str(tmp_path / 'missing.json')]) == 2


def test_unknown_structure(random_fom):
    """Confirm argparse rejects unknown structures."""
    assert run(['reduce', random_fom, '--structure', 'lpv', '--order', '2']) == 2


def test_generate(tmp_path, capsys):
    """Confirm a single generated model is written where requested."""
    path = tmp_path / 'model.json'
    assert run(['generate', '--kind', 'msd', '--n', '3', '-o', str(path)]) == 0
    assert 'msd-n3-m1-p1-sunit' in capsys.readouterr().out
    assert load_model(path).order == 3


def test_generate_corpus(tmp_path, capsys):
    """Confirm --corpus writes every corpus file."""
    assert run(['generate', '--corpus', str(tmp_path / 'corpus')]) == 0
    result = json.loads(capsys.readouterr().out)
    assert len(result['paths']) == 10


def test_reduce_order_too_large(random_fom):
    """Confirm r >= n exits with status 2."""
    assert run(['reduce', random_fom, '--order', '4']) == 2


def test_reduce_writes_outputs(random_fom, tmp_path, capsys):
    """Confirm model, result and report files with the embedded configuration."""
    prefix = str(tmp_path / 'out')
    code = run(['reduce', random_fom, '--order', '2', '--restarts', '2', '--max-iter', '15',
                '--tol', '1e9', '-o', prefix])
    assert code == 0
    assert load_model(prefix + '.model.json').order == 2
    with open(prefix + '.result.json') as in_file:
        result = json.load(in_file)
    assert result['config']['order'] == 2
    assert len(result['runs']) == 2
    with open(prefix + '.report.json') as in_file:
        assert json.load(in_file)['passed'] is True
    assert 'lti-oc1' in capsys.readouterr().out


def test_reduce_certification_failure(random_fom, tmp_path):
    """Confirm a failed certificate exits with status 5 after writing outputs."""
    prefix = str(tmp_path / 'out')
    assert run(['reduce', random_fom, '--order', '1', '--restarts', '1', '--max-iter', '5',
                '--tol', '0', '-o', prefix]) == 5
    with open(prefix + '.report.json') as in_file:
        assert json.load(in_file)['passed'] is False


def test_reduce_optimizer_failure(random_fom):
    """Confirm OptimizationFailed exits with status 4."""
    with mock.patch('strh2.cli.reduce', side_effect=OptimizationFailed("none")):
        assert run(['reduce', random_fom, '--order', '2']) == 4


def test_gradcheck(tmp_path, capsys):
    """Confirm analytic and finite-difference gradients agree for a second-order model."""
    fom, rom = tmp_path / 'fom.json', tmp_path / 'rom.json'
    save_model(gen_msd_chain(4, seed=5), fom)
    save_model(SecondOrderROM([0.3, 0.8], [1.2, 2.5], [[1.0], [-0.4]], [[0.6, 0.9]]), rom)
    assert run(['gradcheck', str(fom), str(rom), '--structure', 'so']) == 0
    out = capsys.readouterr().out
    assert 'finite diff' in out
    assert json.loads(out[out.index('{'):])['coordinates'] == 8


def test_check_conditions_self_pair(random_fom, capsys):
    """Confirm a model certifies against its own diagonal form."""
    assert run(['check-conditions', random_fom, random_fom]) == 0
    assert 'lti-oc3' in capsys.readouterr().out


def test_check_conditions_failure(random_fom, tmp_path):
    """Confirm residual failures exit with status 5 and still write the report."""
    rom = tmp_path / 'rom.json'
    save_model(gen_random_stable(2, seed=9), rom)
    report = tmp_path / 'report.json'
    assert run(['check-conditions', random_fom, str(rom), '-o', str(report)]) == 5
    with open(report) as in_file:
        assert json.load(in_file)['structure'] == 'unstructured'


def test_report_csv(random_fom, tmp_path):
    """Confirm the CSV header and one row per grid node."""
    rom = tmp_path / 'rom.json'
    save_model(gen_random_stable(2, seed=9), rom)
    csv_path = tmp_path / 'error.csv'
    assert run(['report', random_fom, str(rom), '--grid-nodes', '64', '-o', str(csv_path)]) == 0
    lines = csv_path.read_text().splitlines()
    assert lines[0] == 'omega,abs_error'
    assert len(lines) == 65
