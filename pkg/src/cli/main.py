"""
Command-line entry point.

Exit codes: 0 success, 1 unexpected failure, 2 configuration or user error,
3 numerical failure, 4 gradient check failure.
"""

import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from src.cli import commands
from src.core.config import ConfigurationError, load_config
from src.core.exceptions import GradientCheckFailure, NumericalError, SpiError
from src.numerics.gradcheck import CHECKS
from src.shared.utils import error_tracker, setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USER_ERROR = 2
EXIT_NUMERICAL = 3
EXIT_VERIFICATION = 4

# flag dest -> config key, applied after --set so flags win
FLAG_KEYS = {
    'gamma': 'training.gamma',
    'rho': 'training.rho',
    'warmup': 'training.warmup_epochs',
    'loss_mask': 'training.loss_mask',
    'epochs': 'training.epochs',
    'iters': 'training.iters_per_epoch',
    'interval': 'training.injection_interval',
    'anchor_mode': 'training.anchor_mode',
    'train_seed': 'training.seed',
    'data_seed': 'dataset.seed',
}


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, GradientCheckFailure):
        return EXIT_VERIFICATION
    if isinstance(error, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(error, (ConfigurationError, SpiError, FileNotFoundError)):
        return EXIT_USER_ERROR
    return EXIT_INTERNAL


def parse_set_options(values: Optional[List[str]]) -> Dict[str, Any]:
    overrides = {}
    for item in values or []:
        key, sep, value = item.partition('=')
        if not sep or not key.strip():
            raise ConfigurationError(f"--set expects section.key=value, got {item!r}", keys=[item])
        overrides[key.strip()] = value.strip()
    return overrides


def collect_overrides(args) -> Dict[str, Any]:
    overrides = parse_set_options(args.set)
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, 'no_removal', False):
        overrides['training.removal_enabled'] = False
    if getattr(args, 'no_ema', False):
        overrides['training.use_ema'] = False
    if getattr(args, 'no_injection', False):
        overrides['training.injection_enabled'] = False
    return overrides


def _seed_list(text: str) -> List[int]:
    try:
        return [int(item) for item in text.split(',') if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers: {text!r}")


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument('--config', '-c', type=str,
                        help='YAML configuration file (default: config/settings.yaml)')
    parser.add_argument('--set', action='append', metavar='SECTION.KEY=VALUE',
                        help='Override one configuration value (repeatable)')
    parser.add_argument('--output-dir', '-o', type=str,
                        default=os.getenv('SPI_OUTPUT_DIR', 'runs'),
                        help='Directory for the manifest and run artifacts (default: $SPI_OUTPUT_DIR or runs)')


def _add_training_flags(parser: argparse.ArgumentParser):
    parser.add_argument('--gamma', type=float, help='Injection confidence threshold')
    parser.add_argument('--rho', type=float, help='EMA weight of the newest pseudo-label (1.0 disables averaging)')
    parser.add_argument('--warmup', type=int, help='Epochs before the labeled target set may change')
    parser.add_argument('--loss-mask', type=str, help='Enabled losses joined by +, e.g. con+ils+ida+cls')
    parser.add_argument('--epochs', type=int, help='Number of epochs')
    parser.add_argument('--iters', type=int, help='Iterations per epoch (0: ceil(|T| / batch))')
    parser.add_argument('--seed', dest='train_seed', type=int, help='Training seed')
    parser.add_argument('--interval', choices=['epoch', 'iteration'], help='Injection interval')
    parser.add_argument('--anchor-mode', choices=['as_written', 'standard'],
                        help='Contrastive anchor normalization')
    parser.add_argument('--no-removal', action='store_true', help='Never remove injected samples')
    parser.add_argument('--no-ema', action='store_true', help='Use the latest pseudo-label instead of the EMA')
    parser.add_argument('--no-injection', action='store_true', help='Keep the labeled target set fixed')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='spi',
        description='Semi-supervised domain adaptation with soft pseudo-label injection'
    )
    subparsers = parser.add_subparsers(dest='command', required=True)

    generate = subparsers.add_parser('generate', help='Generate a synthetic domain-shift dataset snapshot')
    _add_common(generate)
    generate.add_argument('--out', type=str, help='Snapshot CSV path (default: <output-dir>/snapshot.csv)')
    generate.add_argument('--seed', dest='data_seed', type=int, help='Dataset seed')
    generate.set_defaults(func=commands.cmd_generate)

    train = subparsers.add_parser('train', help='Train a model and write metrics, summary and checkpoint')
    _add_common(train)
    train.add_argument('--snapshot', type=str, help='Dataset snapshot (default: generate from config)')
    _add_training_flags(train)
    train.set_defaults(func=commands.cmd_train)

    evaluate = subparsers.add_parser('eval', help='Evaluate a checkpoint on the target test split')
    _add_common(evaluate)
    evaluate.add_argument('--checkpoint', type=str, required=True, help='Checkpoint written by train')
    evaluate.add_argument('--snapshot', type=str, help='Dataset snapshot (default: generate from config)')
    evaluate.set_defaults(func=commands.cmd_eval)

    check = subparsers.add_parser('gradcheck', help='Finite-difference check of every loss gradient')
    _add_common(check)
    check.add_argument('--seed', type=int, default=0, help='Seed for the random test points (default: 0)')
    check.add_argument('--configs', type=int, default=20,
                       help='Random configurations per loss (default: 20)')
    check.add_argument('--only', action='append', choices=[name for name, _ in CHECKS],
                       help='Run only the named check (repeatable)')
    check.set_defaults(func=commands.cmd_gradcheck)

    sweep = subparsers.add_parser('sweep', help='Train over a parameter grid and aggregate across seeds')
    _add_common(sweep)
    sweep.add_argument('--grid', action='append', metavar='NAME=V1,V2',
                       help='Parameter and values; several --grid entries form a cartesian product')
    sweep.add_argument('--preset', action='append', choices=sorted(commands.SWEEP_PRESETS),
                       help='Predefined ablation grid (repeatable)')
    sweep.add_argument('--seeds', type=_seed_list, help='Comma-separated seeds (default: sweep.seeds)')
    sweep.add_argument('--workers', type=int, help='Worker processes (default: sweep.workers)')
    sweep.add_argument('--snapshot', type=str,
                       help='Fixed dataset snapshot; without it each seed also reseeds the dataset')
    sweep.add_argument('--database', type=str, help='SQLite result store (default: <output-dir>/sweep.db)')
    sweep.add_argument('--sweep-id', type=str, help='Result group id (default: derived from config and grid)')
    sweep.add_argument('--resume', action='store_true', help='Skip seeds already stored for this sweep id')
    sweep.add_argument('--keep-artifacts', action='store_true',
                       help='Write per-run metrics and checkpoints under <output-dir>/cells')
    sweep.set_defaults(func=commands.cmd_sweep)

    retrieve = subparsers.add_parser('nn-retrieve', help='Nearest source neighbours of target test samples')
    _add_common(retrieve)
    retrieve.add_argument('--checkpoint', type=str, required=True, help='Checkpoint written by train')
    retrieve.add_argument('--snapshot', type=str, help='Dataset snapshot (default: generate from config)')
    retrieve.add_argument('--k', type=int, default=4, help='Neighbours per query (default: 4)')
    retrieve.add_argument('--queries', type=int, default=10, help='Number of target test queries (default: 10)')
    retrieve.set_defaults(func=commands.cmd_nn_retrieve)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, resolve configuration, run one command and return its exit code"""
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr
    )
    args = build_parser().parse_args(argv)

    try:
        config = load_config(args.config, collect_overrides(args))
        config.validate()
        setup_logging(config)
        return args.func(args, config)

    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return EXIT_INTERNAL

    except Exception as e:
        code = exit_code_for(e)
        context = {'command': args.command, 'exit_code': code}
        if isinstance(e, NumericalError) and e.epoch is not None:
            context.update(e.diagnostics())
        error_tracker.track_error(e, context)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        if code == EXIT_INTERNAL:
            logger.exception("Unexpected failure")
        return code
