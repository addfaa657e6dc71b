"""
End-to-end tests of the command-line surface and its exit codes
"""

import csv
import json

import pytest
import yaml

from src.cli.main import (
    EXIT_NUMERICAL, EXIT_OK, EXIT_USER_ERROR, EXIT_VERIFICATION, build_parser, collect_overrides, main
)
from src.cli.manifest import read_manifest
from src.core import objective
from src.core.exceptions import NonFiniteLoss
from src.numerics import losses
from src.numerics.losses import LossValueWithGrad

TINY = {
    'dataset': {'n_classes': 3, 'n_source': 60, 'n_target_unlabeled': 48, 'n_target_test': 30, 'shots': 2},
    'model': {'hidden': [16], 'embedding_dim': 8},
    'views': {'n_local': 2},
    'training': {'epochs': 2, 'iters_per_epoch': 3, 'warmup_epochs': 1, 'eta_sup': 2, 'batch_unlabeled': 8,
                 'top_k': 3, 'lr_peak': 0.01, 'lr_floor': 0.001},
    'sweep': {'seeds': [0, 1]},
}


@pytest.fixture
def cli(tmp_path):
    """Runs main() against a tiny YAML config, logging under tmp_path"""
    config_path = tmp_path / 'tiny.yaml'
    config_path.write_text(yaml.safe_dump({**TINY, 'logging': {'file': str(tmp_path / 'logs' / 'spi.log')}}))

    def run(command, *args, out='run'):
        argv = [command, '--config', str(config_path), '--output-dir', str(tmp_path / out), *args]
        return main([str(a) for a in argv])

    return run


def test_generate_writes_snapshot_and_manifest(cli, tmp_path, capsys):
    assert cli('generate') == EXIT_OK
    snapshot = tmp_path / 'run' / 'snapshot.csv'
    assert snapshot.read_text().splitlines()[0] == 'split,id,label,x0,x1'
    manifest = read_manifest(tmp_path / 'run')
    assert manifest.command == 'generate'
    assert manifest.resolved_config['dataset']['shots'] == 2
    assert f"snapshot: {snapshot}" in capsys.readouterr().out


def test_invalid_config_exits_with_user_error(cli, capsys):
    assert cli('generate', '--set', 'dataset.shots=0') == EXIT_USER_ERROR
    assert 'dataset.shots' in capsys.readouterr().err


def test_unknown_key_exits_with_user_error(cli, capsys):
    assert cli('train', '--set', 'training.nope=1') == EXIT_USER_ERROR
    assert 'training.nope' in capsys.readouterr().err


def test_train_then_eval_and_retrieve(cli, tmp_path, capsys):
    assert cli('train', '--gamma', 0.9, '--rho', 0.5, '--warmup', 1) == EXIT_OK
    run_dir = tmp_path / 'run'
    for name in ('metrics.csv', 'summary.json', 'model.ckpt', 'pseudo_labels.csv', 'manifest.json'):
        assert (run_dir / name).exists()
    training = read_manifest(run_dir).resolved_config['training']
    assert (training['gamma'], training['rho'], training['warmup_epochs']) == (0.9, 0.5, 1)
    assert len((run_dir / 'metrics.csv').read_text().splitlines()) == 3
    assert 'final test_acc=' in capsys.readouterr().out

    checkpoint = run_dir / 'model.ckpt'
    assert cli('eval', '--checkpoint', checkpoint, out='eval') == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith('test_acc=')
    assert 'class_2:' in out

    assert cli('nn-retrieve', '--checkpoint', checkpoint, '--k', 3, '--queries', 4, out='nn') == EXIT_OK
    with open(tmp_path / 'nn' / 'retrieval.csv', newline='') as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 12
    assert [int(r['rank']) for r in rows[:3]] == [0, 1, 2]
    assert 'mean label agreement' in capsys.readouterr().out


def test_eval_rejects_mismatched_checkpoint(cli, tmp_path):
    assert cli('train', '--epochs', 0) == EXIT_OK
    code = cli('eval', '--checkpoint', tmp_path / 'run' / 'model.ckpt', '--set', 'dataset.n_classes=4', out='eval')
    assert code == EXIT_USER_ERROR


def test_train_from_snapshot_is_deterministic(cli, tmp_path):
    assert cli('generate', out='data') == EXIT_OK
    snapshot = tmp_path / 'data' / 'snapshot.csv'
    assert cli('train', '--snapshot', snapshot, out='a') == EXIT_OK
    assert cli('train', '--snapshot', snapshot, out='b') == EXIT_OK
    assert (tmp_path / 'a' / 'metrics.csv').read_bytes() == (tmp_path / 'b' / 'metrics.csv').read_bytes()


def test_missing_snapshot(cli, tmp_path, capsys):
    assert cli('train', '--snapshot', tmp_path / 'nope.csv') == EXIT_USER_ERROR
    assert 'snapshot not found' in capsys.readouterr().err


def test_non_finite_loss_exits_with_numerical_failure(cli, monkeypatch, capsys):
    def explode(self, *args, **kwargs):
        raise NonFiniteLoss("loss_con is nan", parts={'con': float('nan')})

    monkeypatch.setattr(objective.SpiObjective, 'evaluate', explode)
    assert cli('train') == EXIT_NUMERICAL
    assert 'epoch 0, iteration 0' in capsys.readouterr().err


def test_divergent_learning_rate_exits_with_numerical_failure(cli, capsys):
    huge = [f'training.{key}=1e300' for key in ('lr_start', 'lr_peak', 'lr_floor')]
    assert cli('train', *(arg for value in huge for arg in ('--set', value))) == EXIT_NUMERICAL
    err = capsys.readouterr().err
    assert 'at epoch 0, iteration' in err
    assert 'InvalidInput' not in err


def test_gradcheck_passes(cli, capsys):
    assert cli('gradcheck', '--configs', 3) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 5
    assert all(line.startswith('PASS') for line in lines)
    assert [line.split()[1] for line in lines] == ['con:', 'ils:', 'ida:', 'cls:', 'total:']


def test_gradcheck_detects_a_wrong_gradient(cli, monkeypatch, capsys):
    correct = losses.classification_loss

    def flipped(*args, **kwargs):
        result = correct(*args, **kwargs)
        return LossValueWithGrad(result.value, -result.grad)

    monkeypatch.setattr(losses, 'classification_loss', flipped)
    assert cli('gradcheck', '--configs', 3, '--only', 'cls') == EXIT_VERIFICATION
    captured = capsys.readouterr()
    assert captured.out.startswith('FAIL cls')
    assert 'GradientCheckFailure' in captured.err


def test_sweep_writes_aggregate(cli, tmp_path, capsys):
    assert cli('sweep', '--grid', 'training.gamma=0.7,0.9') == EXIT_OK
    with open(tmp_path / 'run' / 'aggregate.csv', newline='') as f:
        rows = list(csv.DictReader(f))
    assert [r['cell'] for r in rows] == ['training.gamma=0.7', 'training.gamma=0.9']
    assert all(r['n_seeds'] == '2' and r['n_failed'] == '0' for r in rows)
    assert 0.0 <= float(rows[0]['mean_test_acc']) <= 1.0
    assert (tmp_path / 'run' / 'sweep.db').exists()

    # resuming the same sweep skips every stored seed
    assert cli('sweep', '--grid', 'training.gamma=0.7,0.9', '--resume') == EXIT_OK
    assert 'training.gamma=0.7: ' in capsys.readouterr().out


def test_sweep_rejects_bad_grids(cli):
    assert cli('sweep') == EXIT_USER_ERROR
    assert cli('sweep', '--grid', 'training.unknown=1,2') == EXIT_USER_ERROR
    assert cli('sweep', '--grid', 'training.gamma=') == EXIT_USER_ERROR
    assert cli('sweep', '--grid', 'training.gamma=2.0') == EXIT_USER_ERROR


def test_flags_override_set_options():
    args = build_parser().parse_args(['train', '--set', 'training.gamma=0.5', '--gamma', '0.95', '--no-removal'])
    overrides = collect_overrides(args)
    assert overrides['training.gamma'] == 0.95
    assert overrides['training.removal_enabled'] is False


def test_summary_matches_metrics(cli, tmp_path):
    assert cli('train') == EXIT_OK
    summary = json.loads((tmp_path / 'run' / 'summary.json').read_text())
    with open(tmp_path / 'run' / 'metrics.csv', newline='') as f:
        last = list(csv.DictReader(f))[-1]
    assert float(last['test_acc']) == summary['final']['test_acc']
    assert int(last['n_labeled_target']) == summary['final']['n_labeled_target']
