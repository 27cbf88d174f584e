import json
import os

import pandas as pd
import pytest

from cli import EXIT_INPUT, EXIT_OK, build_parser, main


@pytest.fixture
def tiny_run_config(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({
        'count': 6,
        'seed': 7,
        'rect_stress_prob': 0.0,
        'out_dir': str(tmp_path / 'out'),
        'bank_path': str(tmp_path / 'bank.json'),
        'train': {'inner_steps': 1, 'outer_steps': 1, 'batch_size': 4, 'width': 4,
                  'layers': 2, 'order': 1, 'val_fraction': 0.0},
    }), encoding='utf-8')
    return str(path)


def test_solve_prints_solution(capsys):
    assert main(['solve', 'fig1_5bus']) == EXIT_OK
    body = json.loads(capsys.readouterr().out)
    assert body['converged'] is True
    assert body['mode_used'] == ['Mode1']
    assert abs(body['power_balance']['imbalance']) < 1e-6


def test_solve_writes_file_and_basis(tmp_path):
    out = tmp_path / 'sol.json'
    basis = tmp_path / 'basis'
    assert main(['solve', 'fig1_5bus', '--out', str(out), '--dump-basis', str(basis)]) == EXIT_OK
    assert json.loads(out.read_text(encoding='utf-8'))['case'] == 'fig1_5bus'
    assert sorted(os.listdir(basis)) == ['cheb_0.csv', 'cheb_1.csv', 'cheb_2.csv', 'cheb_3.csv',
                                         'laplacian.csv', 'scaled_laplacian.csv']


def test_unknown_case_is_an_input_error():
    assert main(['solve', 'no_such_case']) == EXIT_INPUT


def test_bad_config_is_an_input_error(tmp_path):
    path = tmp_path / 'bad.json'
    path.write_text(json.dumps({'split': 2.0}), encoding='utf-8')
    assert main(['solve', 'fig1_5bus', '--config', str(path)]) == EXIT_INPUT


def test_invalid_mode_is_rejected_by_argparse():
    with pytest.raises(SystemExit):
        build_parser().parse_args(['solve', 'fig1_5bus', '--mode', 'Mode3'])


def test_branch_argument():
    args = build_parser().parse_args(['trip', 'fig1_5bus', '--data', 'x.csv', '--branch', '1,2'])
    assert args.branch == (1, 2)
    with pytest.raises(SystemExit):
        build_parser().parse_args(['trip', 'fig1_5bus', '--data', 'x.csv', '--branch', '1-2'])


def test_gen_train_eval_pipeline(tmp_path, tiny_run_config, capsys):
    data = str(tmp_path / 'data.csv')
    assert main(['gen', 'fig1_5bus', '--config', tiny_run_config, '--out', data]) == EXIT_OK
    assert len(pd.read_csv(data)) == 6

    bank = str(tmp_path / 'bank.json')
    logs = str(tmp_path / 'logs')
    assert main(['train', 'fig1_5bus', '--config', tiny_run_config, '--data', data, '--all-modes',
                 '--out-bank', bank, '--log-dir', logs]) == EXIT_OK
    log = pd.read_csv(os.path.join(logs, 'training_log.csv'))
    assert set(log['mode']) == {'Mode1', 'Mode2'}

    capsys.readouterr()
    out_dir = str(tmp_path / 'eval')
    assert main(['eval', 'fig1_5bus', '--config', tiny_run_config, '--data', data, '--bank', bank,
                 '--out-dir', out_dir]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert set(summary['methods']) == {'oracle', 'multi_pg_gnn'}
    assert os.path.isfile(os.path.join(out_dir, 'metrics.csv'))


def test_eval_without_bank_is_an_input_error(tmp_path, tiny_run_config):
    data = str(tmp_path / 'data.csv')
    assert main(['gen', 'fig1_5bus', '--config', tiny_run_config, '--out', data]) == EXIT_OK
    assert main(['eval', 'fig1_5bus', '--config', tiny_run_config, '--data', data,
                 '--bank', str(tmp_path / 'missing.json')]) == EXIT_INPUT
