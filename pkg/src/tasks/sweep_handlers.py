"""
Sweep cell worker. Runs in a separate process, so it receives plain data
(resolved config, overrides, seed) and rebuilds everything it needs.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Optional

from src.core.config import Config
from src.core.exceptions import SpiError
from src.core.trainer import Trainer
from src.data import datasets, snapshot

logger = logging.getLogger(__name__)


def build_cell_config(resolved: Dict[str, Dict[str, Any]], overrides: Dict[str, Any], seed: int,
                      reseed_dataset: bool) -> Config:
    config = Config(use_env=False)
    for section, values in resolved.items():
        for key, value in values.items():
            config.set_value(f"{section}.{key}", value)
    for key, value in overrides.items():
        config.set_value(key, value)
    config.set_value('training.seed', seed)
    if reseed_dataset:
        config.set_value('dataset.seed', seed)
    config.validate()
    return config


def run_sweep_cell(payload: Dict[str, Any]) -> Dict[str, Any]:
    """
    Train one (cell, seed) and report its final numbers.

    payload keys: sweep_id, cell_key, parameter, value, overrides, seed,
    resolved_config, snapshot_path (optional), output_dir (optional)
    """
    cell_key = payload['cell_key']
    seed = int(payload['seed'])
    snapshot_path: Optional[str] = payload.get('snapshot_path')
    result = {
        'sweep_id': payload['sweep_id'],
        'cell_key': cell_key,
        'parameter': payload['parameter'],
        'value': payload['value'],
        'seed': seed,
        'success': False,
    }

    try:
        config = build_cell_config(payload['resolved_config'], payload['overrides'], seed,
                                   reseed_dataset=snapshot_path is None)
        bundle = snapshot.load(snapshot_path) if snapshot_path else datasets.generate(config.dataset)

        output_dir = None
        if payload.get('output_dir'):
            output_dir = Path(payload['output_dir']) / cell_key.replace('|', '__') / f"seed_{seed}"

        trainer = Trainer(config, bundle)
        reports = trainer.run(output_dir)
        summary = trainer.summary()['injection']
        result.update({
            'success': True,
            'final_test_acc': reports[-1].test_acc if reports else None,
            'n_injected': summary['n_injected_final'],
            'false_positive_rate': summary['false_positive_rate'],
        })
        logger.info(f"Sweep cell {cell_key} seed={seed} finished: test_acc={result['final_test_acc']}")

    except SpiError as e:
        logger.error(f"Sweep cell {cell_key} seed={seed} failed: {e}")
        result['error_message'] = f"{type(e).__name__}: {e}"

    return result
