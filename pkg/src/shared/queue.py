import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import Any, Callable, Dict, List

from src.core.database import SweepDatabase
from src.tasks.sweep_handlers import run_sweep_cell

logger = logging.getLogger(__name__)


class SweepQueue:
    """Runs sweep cells in-process or on a process pool and records each result as it lands"""

    def __init__(self, database: SweepDatabase, workers: int = 1,
                 handler: Callable[[Dict[str, Any]], Dict[str, Any]] = run_sweep_cell):
        self.database = database
        self.workers = max(1, workers)
        self.handler = handler
        self.pending: List[Dict[str, Any]] = []
        self.stats = {'submitted': 0, 'completed': 0, 'failed': 0, 'skipped': 0}

    def enqueue(self, payload: Dict[str, Any], skip_completed: bool = False) -> bool:
        """Queue one (cell, seed); with skip_completed, seeds already stored are not rerun"""
        if skip_completed and payload['seed'] in self.database.completed_seeds(
                payload['sweep_id'], payload['cell_key']):
            self.stats['skipped'] += 1
            logger.debug(f"Skipping completed cell {payload['cell_key']} seed={payload['seed']}")
            return False
        self.pending.append(payload)
        self.stats['submitted'] += 1
        return True

    def _record(self, result: Dict[str, Any]):
        self.database.record_result(
            result['sweep_id'], result['cell_key'], result['parameter'], result['value'],
            result['seed'], result['success'],
            final_test_acc=result.get('final_test_acc'),
            n_injected=result.get('n_injected'),
            false_positive_rate=result.get('false_positive_rate'),
            error_message=result.get('error_message'),
        )
        self.stats['completed' if result['success'] else 'failed'] += 1

    def run(self) -> List[Dict[str, Any]]:
        payloads, self.pending = self.pending, []
        results = []
        if not payloads:
            return results

        logger.info(f"Running {len(payloads)} sweep jobs on {self.workers} worker(s)")
        if self.workers == 1:
            for payload in payloads:
                result = self.handler(payload)
                self._record(result)
                results.append(result)
        else:
            with ProcessPoolExecutor(max_workers=self.workers) as executor:
                futures = [executor.submit(self.handler, payload) for payload in payloads]
                for future in as_completed(futures):
                    result = future.result()
                    self._record(result)
                    results.append(result)

        results.sort(key=lambda r: (r['cell_key'], r['seed']))
        logger.info(
            f"Sweep jobs finished: {self.stats['completed']} completed, {self.stats['failed']} failed",
            extra={'extra_data': dict(self.stats)}
        )
        return results

    def get_stats(self) -> Dict[str, int]:
        return dict(self.stats)
