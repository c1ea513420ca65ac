"""
End-to-end tests of the command-line entry points and their exit codes
"""
import json

import pandas as pd
import pytest

from cam_navigation.cli import (
    EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_CONTRACT, EXIT_NUMERIC, EXIT_OK, build_parser, main,
)
from cam_navigation.evaluator import TIMING_COLUMNS

QUICK_EVAL = ['--set', 'eval.n_candidates=8', '--set', 'task.horizon=3', '--set', 'output.run_name=t']


def _train(env, output_root, *extra):
    argv = [
        'train', '--set', f'env={env}', '--set', 'train.episodes=0', '--set', 'model.hidden=6',
        '--set', 'model.layers=1', '--set', 'output.run_name=t', *extra,
    ]
    assert main(argv) == EXIT_OK
    return output_root / 'train' / 't' / 'checkpoints' / 'final.npz'


@pytest.fixture
def car_checkpoint(output_root):
    return _train('car', output_root)


def test_train_without_episodes_writes_checkpoint_and_config(output_root):
    path = _train('car', output_root)
    assert path.exists()
    payload = json.loads((output_root / 'train' / 't' / 'config.json').read_text())
    assert payload['config']['env'] == 'car'
    assert 'train.episodes=0' in payload['overrides']


def test_missing_env_is_a_config_error(output_root):
    assert main(['train']) == EXIT_CONFIG


def test_bad_override_is_a_config_error(output_root):
    assert main(['train', '--set', 'env=car', '--set', 'train.batch_size=0']) == EXIT_CONFIG


def test_missing_checkpoint(output_root, tmp_path):
    assert main(['eval', '--checkpoint', str(tmp_path / 'none.npz')]) == EXIT_CHECKPOINT


def test_eval_writes_metrics_and_timing(car_checkpoint, output_root):
    code = main(['eval', '--checkpoint', str(car_checkpoint), '--tasks', '2', *QUICK_EVAL])
    assert code == EXIT_OK
    out = output_root / 'eval' / 't'
    frame = pd.read_csv(out / 'metrics.csv')
    assert len(frame) == 1
    assert frame['task_count'].item() == 2
    assert not set(TIMING_COLUMNS) & set(frame.columns)
    assert set(json.loads((out / 'timing.json').read_text())) == {'mean_ms', 'max_ms'}


def test_eval_records_and_invariance(car_checkpoint, output_root):
    code = main(['eval', '--checkpoint', str(car_checkpoint), '--tasks', '1', '--record', '--invariance',
                 '--set', 'eval.n_probe=8', *QUICK_EVAL])
    assert code == EXIT_OK
    out = output_root / 'eval' / 't'
    assert (out / 'trajectories.jsonl').read_text().strip()
    fractions = json.loads((out / 'invariance.json').read_text())
    assert fractions['states'] > 0


def test_eval_density_sweep(car_checkpoint, output_root):
    code = main(['eval', '--checkpoint', str(car_checkpoint), '--tasks', '1',
                 '--sweep-agents', '2', '--sweep-obstacles', '0', '1', *QUICK_EVAL])
    assert code == EXIT_OK
    frame = pd.read_csv(output_root / 'eval' / 't' / 'sweep.csv')
    assert list(frame['obstacles']) == [0, 1]


def test_eval_rejects_other_environment(car_checkpoint, output_root):
    code = main(['eval', '--checkpoint', str(car_checkpoint), '--set', 'env=drone', *QUICK_EVAL])
    assert code == EXIT_CONTRACT


def test_eval_architecture_mismatch_needs_force(car_checkpoint, output_root):
    argv = ['eval', '--checkpoint', str(car_checkpoint), '--tasks', '1', '--set', 'model.hidden=8', *QUICK_EVAL]
    assert main(argv) == EXIT_CONTRACT
    assert main(argv + ['--force']) == EXIT_OK


def test_chase(car_checkpoint, output_root):
    code = main(['chase', '--checkpoint', str(car_checkpoint), '--tasks', '1', *QUICK_EVAL])
    assert code == EXIT_OK
    assert len(pd.read_csv(output_root / 'chase' / 't' / 'metrics.csv')) == 1


def test_gradcheck_passes(output_root):
    assert main(['gradcheck', '--set', 'env=car', '--set', 'output.run_name=t', '--draws', '1']) == EXIT_OK
    rows = [json.loads(line) for line in (output_root / 'gradcheck' / 't' / 'gradcheck.jsonl').read_text().splitlines()]
    assert [r['term'] for r in rows] == ['admissible', 'inadmissible', 'invariance', 'total']
    assert all(r['passed'] for r in rows)


def test_gradcheck_negative_control_fails(output_root):
    argv = ['gradcheck', '--set', 'env=integrator', '--draws', '1', '--hidden', '4', '--corrupt', '0.01']
    assert main(argv) == EXIT_NUMERIC


def test_gradcheck_needs_a_batch(output_root):
    assert main(['gradcheck', '--set', 'env=car', '--batch', '1']) == EXIT_CONTRACT


def test_landscape_for_single_agent_model(output_root):
    checkpoint = _train('integrator', output_root)
    code = main(['landscape', '--checkpoint', str(checkpoint), '--resolution', '5',
                 '--set', 'output.run_name=t'])
    assert code == EXIT_OK
    frame = pd.read_csv(output_root / 'landscape' / 't' / 'landscape.csv')
    assert len(frame) == 25
    assert list(frame.columns) == ['a_i', 'a_j', 'phi']


def test_landscape_needs_two_action_dims(car_checkpoint, output_root):
    code = main(['landscape', '--checkpoint', str(car_checkpoint), '--resolution', '5', *QUICK_EVAL])
    assert code == EXIT_CONTRACT


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
