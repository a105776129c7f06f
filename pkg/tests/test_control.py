"""Test the embedding control module (SDW.control).
The subcommands are driven through main() and ExperimentControl against
temporary output roots.
"""

import glob
import json
import os

import numpy as np
import pytest

import SDW
from SDW.control import *
from SDW.config import load_config
from SDW.errors import OracleFailure, WorkbenchError
from SDW.evaluation import BOUND_MARKER, ResultsTable
from SDW.oracle import OracleSummary


def _config(tmp_path, name='tiny', family='F-RNN', **synthetic):
    spec = {'T': 5, 'L': 3, 'n_sequences': 10}
    spec.update(synthetic)
    d = {'name': name, 'seed': 3,
         'dataset': {'name': 'ar', 'source': 'synthetic', 'synthetic': spec},
         'model': {'family': family, 'width': 4, 'emit_width': 4, 'n_components': 2},
         'train': {'total_updates': 4, 'batch_size': 4, 'validate_every': 2}}
    if family == 'F-SRNN':
        d['model']['latent_dim'] = 2
    path = tmp_path / ('%s.json' % name)
    path.write_text(json.dumps(d))
    return str(path)


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv('SDW_OUTPUT_ROOT', str(tmp_path / 'runs'))
    return str(tmp_path / 'runs')


def test_bad_config_exits_with_two(tmp_path, root, capsys):
    path = tmp_path / 'bad.json'
    path.write_text(json.dumps({'model': {'family': 'NOPE'}}))
    assert main(['train', '--config', str(path)]) == EXIT_CONFIG
    assert 'model family' in capsys.readouterr().err
    assert main(['train', '--config', str(tmp_path / 'missing.json')]) == EXIT_CONFIG


def test_synth_is_reproducible_and_refuses_to_overwrite(tmp_path, root):
    config = _config(tmp_path)
    out = str(tmp_path / 'data')
    assert main(['synth', '--config', config, '--out', out]) == EXIT_OK
    first = np.load(os.path.join(out, 'train.npy'))
    assert first.shape == (8, 5, 3)
    assert main(['synth', '--config', config, '--out', out]) == EXIT_ERROR
    assert main(['synth', '--config', config, '--out', out, '--force']) == EXIT_OK
    assert np.array_equal(np.load(os.path.join(out, 'train.npy')), first)
    with open(os.path.join(out, 'manifest.json')) as f:
        manifest = json.load(f)
    assert manifest['meta']['seed'] == 3


def test_synth_default_directory(tmp_path, root):
    path = ExperimentControl().cmd_synth(load_config(_config(tmp_path)))
    assert path == os.path.join(root, 'data', 'ar', 'manifest.json')


def test_train_eval_table(tmp_path, root, capsys):
    """A tiny run end to end: train, score the best checkpoint, tabulate"""
    control = ExperimentControl()
    assert control.output_root == root
    run_dir, state = control.cmd_train(load_config(_config(tmp_path)), plot=True)
    assert run_dir == os.path.join(root, 'tiny')
    assert state.update == 4
    assert os.path.isfile(os.path.join(run_dir, 'metrics.png'))

    report = control.cmd_eval(run_dir, csv=True)
    assert report.bound == 'exact'
    assert report.dataset_id == 'ar/test'
    assert os.path.isfile(os.path.join(run_dir, 'eval-test-exact.json'))
    assert os.path.isfile(os.path.join(run_dir, 'eval-test-exact.csv'))
    assert 'tiny on ar/test' in capsys.readouterr().out

    table = control.cmd_table([os.path.join(root, '*', 'eval-*.json')], csv=True, out_dir=str(tmp_path))
    assert table.rows[0][0] == 'tiny'
    assert os.path.isfile(str(tmp_path / 'table.csv'))
    runtime = control.cmd_table([os.path.join(run_dir, 'eval-test-exact.json')], runtime=True)
    assert runtime.rows[0][:2] == ['tiny', 'F-RNN']


def test_eval_multi_sample_from_k(tmp_path, root):
    control = ExperimentControl()
    run_dir, _ = control.cmd_train(load_config(_config(tmp_path, name='srnn', family='F-SRNN')))
    report = control.cmd_eval(run_dir, split='valid', k=3, csv=True)
    assert report.bound == 'multi-sample(3)'
    assert os.path.isfile(os.path.join(run_dir, 'eval-valid-multi-sample3.json'))
    with open(os.path.join(run_dir, 'eval-valid-multi-sample3.csv'), 'rb') as f:
        assert BOUND_MARKER.encode('utf-8') in f.read()
    table = control.cmd_table([os.path.join(run_dir, 'eval-*.json')], csv=True, out_dir=str(tmp_path))
    with open(str(tmp_path / 'table.csv'), 'rb') as f:
        assert ResultsTable.from_csv(f.read().decode('utf-8')).rows == table.rows
    assert main(['eval', run_dir, '--bound', 'exact']) == EXIT_ERROR


def test_eval_without_checkpoint(tmp_path, root):
    assert main(['eval', str(tmp_path / 'nowhere')]) == EXIT_ERROR
    with pytest.raises(WorkbenchError):
        ExperimentControl().cmd_table([str(tmp_path / 'none-*.json')])


def test_aborted_training_exits_with_three(tmp_path, root, capsys):
    config = _config(tmp_path, name='blowup', noise_scale=1e200)
    assert main(['train', '--config', config, '--out', str(tmp_path / 'blowup')]) == EXIT_ABORTED
    assert 'training aborted' in capsys.readouterr().err


def test_sweep_writes_the_grid(tmp_path, root):
    config = _config(tmp_path, name='zf', family='F-SRNN')
    out = str(tmp_path / 'sweep')
    assert main(['sweep', '--config', config, '--out', out]) == EXIT_OK
    written = sorted(glob.glob(os.path.join(out, '*.json')))
    assert len(written) == 9
    cells = {(c.train.alpha, c.train.beta) for c in map(load_config, written)}
    assert len(cells) == 9


def test_oracle_failure_exits_with_four(tmp_path, monkeypatch, capsys):
    summary = OracleSummary()
    summary.add('always-fails', False)
    monkeypatch.setattr('SDW.control.run_oracle_suite', lambda seed: summary)
    out = str(tmp_path / 'oracle.json')
    assert main(['oracle', '--out', out]) == EXIT_ORACLE
    assert 'always-fails' in capsys.readouterr().err
    with open(out) as f:
        assert json.load(f)['passed'] is False
    with pytest.raises(OracleFailure):
        ExperimentControl(str(tmp_path)).cmd_oracle()


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


if __name__ == "__main__":

    test_parser_requires_a_command()
