"""
Command implementations. Each command receives parsed arguments and a
validated Config, writes its manifest first, and returns an exit code.
Errors propagate to main(), which maps them to exit codes.
"""

import csv
import hashlib
import itertools
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.cli.manifest import RunManifest, write_manifest
from src.core import retrieval
from src.core.config import Config, ConfigurationError
from src.core.database import SweepDatabase
from src.core.exceptions import ShapeMismatch, StorageError
from src.core.trainer import (
    CHECKPOINT_FILE, METRICS_FILE, PSEUDO_LABELS_FILE, SUMMARY_FILE, Trainer, evaluate, per_class_accuracy
)
from src.data import datasets, snapshot
from src.data.datasets import DatasetBundle
from src.engine import model
from src.numerics import gradcheck
from src.shared.queue import SweepQueue
from src.shared.utils import PerformanceLogger

logger = logging.getLogger(__name__)

SNAPSHOT_FILE = 'snapshot.csv'
RETRIEVAL_FILE = 'retrieval.csv'
AGGREGATE_FILE = 'aggregate.csv'
AGGREGATE_COLUMNS = ['cell', 'parameter', 'value', 'n_seeds', 'n_failed', 'mean_test_acc',
                     'std_test_acc', 'mean_false_positive_rate']

SWEEP_PRESETS: Dict[str, Tuple[str, List[str]]] = {
    'rho': ('training.rho', ['1.0', '0.9', '0.7', '0.5', '0.3', '0.1']),
    'gamma': ('training.gamma', ['0.7', '0.8', '0.9']),
    'loss': ('training.loss_mask', ['cls', 'con+cls', 'con+ils+cls', 'con+ida+cls', 'con+ils+ida+cls']),
    'removal': ('training.removal_enabled', ['true', 'false']),
    'interval': ('training.injection_interval', ['epoch', 'iteration']),
    'ema': ('training.use_ema', ['true', 'false']),
}


def _start_run(command: str, args, config: Config, seed: int,
               artifacts: Dict[str, Path]) -> RunManifest:
    arguments = {key: value for key, value in vars(args).items() if key != 'func'}
    manifest = RunManifest(
        command=command,
        config_path=str(config.path) if config.path else None,
        resolved_config=config.resolved(),
        seed=seed,
        output_dir=str(args.output_dir),
        artifacts={name: str(path) for name, path in artifacts.items()},
        arguments=arguments,
    )
    write_manifest(manifest)
    return manifest


def _load_bundle(snapshot_path: Optional[str], config: Config) -> DatasetBundle:
    """Snapshot when given, otherwise generate from the dataset section"""
    if snapshot_path is None:
        return datasets.generate(config.dataset)
    path = Path(snapshot_path)
    if not path.is_file():
        raise StorageError(f"snapshot not found: {path}")
    return snapshot.load(path)


def cmd_generate(args, config: Config) -> int:
    out = Path(args.out) if args.out else Path(args.output_dir) / SNAPSHOT_FILE
    _start_run('generate', args, config, config.dataset.seed,
               {'snapshot': out, 'spec': snapshot.spec_path_for(out)})

    bundle = datasets.generate(config.dataset)
    snapshot.snapshot(bundle, out)

    print(f"snapshot: {out}")
    for split, counts in bundle.statistics().items():
        per_class = ' '.join(f"{key}={value}" for key, value in counts.items() if key != 'total')
        print(f"{split}: total={counts['total']} {per_class}")
    return 0


def cmd_train(args, config: Config) -> int:
    output_dir = Path(args.output_dir)
    _start_run('train', args, config, config.training.seed, {
        'metrics': output_dir / METRICS_FILE,
        'summary': output_dir / SUMMARY_FILE,
        'checkpoint': output_dir / CHECKPOINT_FILE,
        'pseudo_labels': output_dir / PSEUDO_LABELS_FILE,
    })

    bundle = _load_bundle(args.snapshot, config)
    trainer = Trainer(config, bundle)
    reports = trainer.run(output_dir)

    if reports:
        final = reports[-1]
        print(f"final test_acc={final.test_acc:.4f} |T_hat|={final.n_labeled_target} "
              f"false_positives={final.n_false_positive}")
    else:
        print(f"no epochs run; initial model saved to {output_dir / CHECKPOINT_FILE}")
    print(f"metrics: {output_dir / METRICS_FILE}")
    return 0


def _load_model_for(checkpoint_path: str, bundle: DatasetBundle) -> model.ModelParams:
    params, header = model.load_checkpoint(checkpoint_path)
    if params.d_in != bundle.d_in or params.n_classes != bundle.n_classes:
        raise ShapeMismatch(
            f"checkpoint expects d_in={params.d_in} C={params.n_classes}, "
            f"data has d_in={bundle.d_in} C={bundle.n_classes}"
        )
    logger.info(f"Loaded checkpoint {checkpoint_path} (epoch {header.get('epoch')}, seed {header.get('seed')})")
    return params


def cmd_eval(args, config: Config) -> int:
    _start_run('eval', args, config, config.training.seed, {})

    bundle = _load_bundle(args.snapshot, config)
    params = _load_model_for(args.checkpoint, bundle)
    accuracy = evaluate(params, bundle.target_test)
    print(f"test_acc={accuracy:.4f}")
    for label, class_acc in per_class_accuracy(params, bundle.target_test, bundle.n_classes).items():
        print(f"class_{label}: {class_acc:.4f}")
    return 0


def cmd_gradcheck(args, config: Config) -> int:
    _start_run('gradcheck', args, config, args.seed, {})

    with PerformanceLogger('gradcheck', logger, {'seed': args.seed, 'configs': args.configs}):
        results = gradcheck.run_gradcheck(seed=args.seed, n_configs=args.configs, only=args.only)
    for result in results:
        print(result.line())
    for result in results:
        result.raise_if_failed()
    return 0


def cmd_nn_retrieve(args, config: Config) -> int:
    output_dir = Path(args.output_dir)
    _start_run('nn-retrieve', args, config, config.training.seed,
               {'retrieval': output_dir / RETRIEVAL_FILE})

    bundle = _load_bundle(args.snapshot, config)
    params = _load_model_for(args.checkpoint, bundle)
    test = bundle.target_test
    n_queries = min(args.queries, len(test))

    gallery = model.forward_features(params, bundle.source.X)
    queries = model.forward_features(params, test.X[:n_queries])
    results = retrieval.retrieve_batch(queries, test.ids[:n_queries], test.labels[:n_queries],
                                       gallery, bundle.source.ids, bundle.source.labels, args.k)

    path = output_dir / RETRIEVAL_FILE
    try:
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(['query_id', 'query_label', 'rank', 'neighbor_id', 'neighbor_label', 'similarity'])
            for result in results:
                for rank, ((neighbor_id, similarity), label) in enumerate(
                        zip(result.neighbors, result.neighbor_labels)):
                    writer.writerow([result.query_id, result.query_label, rank, neighbor_id, label,
                                     repr(similarity)])
    except OSError as e:
        raise StorageError(f"cannot write retrieval results {path}: {e}")

    for result in results:
        neighbors = ' '.join(f"{nid}:{label}" for (nid, _), label in zip(result.neighbors, result.neighbor_labels))
        print(f"query {result.query_id} (label {result.query_label}): {neighbors} "
              f"agreement={result.agreement:.2f}")
    mean_agreement = float(np.mean([r.agreement for r in results])) if results else 0.0
    print(f"mean label agreement: {mean_agreement:.4f}")
    return 0


def parse_grid(specs: Sequence[str]) -> List[Tuple[str, List[str]]]:
    """`name=v1,v2,...` entries; a loss mask value uses `+` between parts"""
    grid = []
    for spec in specs:
        name, sep, values = spec.partition('=')
        name = name.strip()
        parsed = [value.strip() for value in values.split(',') if value.strip()]
        if not sep or not name:
            raise ConfigurationError(f"Grid entry must be name=v1,v2,...: {spec!r}", keys=[spec])
        if not parsed:
            raise ConfigurationError(f"Grid entry {name} has no values", keys=[name])
        grid.append((name, parsed))
    return grid


def expand_cells(config: Config, grid: List[Tuple[str, List[str]]]) -> List[Dict[str, Any]]:
    """Cartesian product of the grid; every cell is checked against a copy of the config"""
    if not grid:
        raise ConfigurationError("Sweep grid is empty: pass --grid or --preset")

    names = [name for name, _ in grid]
    cells = []
    for combo in itertools.product(*(values for _, values in grid)):
        overrides = dict(zip(names, combo))
        candidate = config.copy()
        for key, value in overrides.items():
            candidate.set_value(key, value)
        candidate.validate()
        cells.append({
            'cell_key': '|'.join(f"{name}={value}" for name, value in overrides.items()),
            'parameter': '|'.join(names),
            'value': '|'.join(combo),
            'overrides': overrides,
        })
    return cells


def sweep_id_for(config: Config, cells: List[Dict[str, Any]], seeds: Sequence[int],
                 snapshot_path: Optional[str]) -> str:
    key = json.dumps({'config': config.resolved(), 'cells': [c['cell_key'] for c in cells],
                      'seeds': list(seeds), 'snapshot': snapshot_path}, sort_keys=True, default=str)
    return 'sweep-' + hashlib.sha1(key.encode('utf-8')).hexdigest()[:12]


def write_aggregate(rows: List[Dict[str, Any]], path: Path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(f, fieldnames=AGGREGATE_COLUMNS, lineterminator='\n')
            writer.writeheader()
            for row in rows:
                writer.writerow({key: (repr(value) if isinstance(value, float) else value)
                                 for key, value in row.items() if key in AGGREGATE_COLUMNS})
    except OSError as e:
        raise StorageError(f"cannot write aggregate {path}: {e}")


def cmd_sweep(args, config: Config) -> int:
    output_dir = Path(args.output_dir)
    grid_specs = list(args.grid or [])
    for preset in args.preset or []:
        name, values = SWEEP_PRESETS[preset]
        grid_specs.append(f"{name}={','.join(values)}")

    cells = expand_cells(config, parse_grid(grid_specs))
    seeds = args.seeds if args.seeds is not None else list(config.sweep.seeds)
    if not seeds:
        raise ConfigurationError("Sweep needs at least one seed", keys=['sweep.seeds'])
    workers = args.workers or config.sweep.workers

    snapshot_path = None
    if args.snapshot:
        snapshot_path = str(Path(args.snapshot).resolve())
        if not Path(snapshot_path).is_file():
            raise StorageError(f"snapshot not found: {snapshot_path}")

    sweep_id = args.sweep_id or sweep_id_for(config, cells, seeds, snapshot_path)
    database_path = Path(args.database) if args.database else output_dir / config.sweep.database
    aggregate_path = output_dir / AGGREGATE_FILE
    _start_run('sweep', args, config, config.training.seed,
               {'database': database_path, 'aggregate': aggregate_path})

    database = SweepDatabase(database_path)
    queue = SweepQueue(database, workers=workers)
    resolved = config.resolved()
    for cell in cells:
        for seed in seeds:
            queue.enqueue({
                'sweep_id': sweep_id,
                'cell_key': cell['cell_key'],
                'parameter': cell['parameter'],
                'value': cell['value'],
                'overrides': cell['overrides'],
                'seed': int(seed),
                'resolved_config': resolved,
                'snapshot_path': snapshot_path,
                'output_dir': str(output_dir / 'cells') if args.keep_artifacts else None,
            }, skip_completed=args.resume)

    with PerformanceLogger('sweep', logger, {'sweep_id': sweep_id, 'cells': len(cells), 'seeds': len(seeds)}):
        queue.run()

    current = {cell['cell_key'] for cell in cells}
    rows = [row for row in database.aggregate(sweep_id) if row['cell'] in current]
    write_aggregate(rows, aggregate_path)

    failed = sum(row['n_failed'] for row in rows)
    if failed:
        logger.warning(f"{failed} sweep runs failed; see {database_path}",
                       extra={'extra_data': {'sweep_id': sweep_id, 'failed': failed}})

    print(f"sweep {sweep_id}: {len(cells)} cells x {len(seeds)} seeds")
    for row in rows:
        print(f"{row['cell']}: mean_test_acc={row['mean_test_acc']:.4f} "
              f"std={row['std_test_acc']:.4f} n={row['n_seeds']} failed={row['n_failed']}")
    print(f"aggregate: {aggregate_path}")
    return 0
