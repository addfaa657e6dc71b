import sqlite3
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Set

import numpy as np

from .exceptions import StorageError

logger = logging.getLogger(__name__)


class SweepDatabase:
    """SQLite store of per-seed sweep results; aggregation reads from here"""

    def __init__(self, db_path):
        self.db_path = Path(db_path)
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self._init_database()

    def _init_database(self):
        """Initialize database and create tables"""
        try:
            with sqlite3.connect(self.db_path) as conn:
                conn.execute('''
                    CREATE TABLE IF NOT EXISTS sweep_results (
                        id INTEGER PRIMARY KEY AUTOINCREMENT,
                        sweep_id TEXT NOT NULL,
                        cell_key TEXT NOT NULL,
                        parameter TEXT NOT NULL,
                        value TEXT NOT NULL,
                        seed INTEGER NOT NULL,
                        success BOOLEAN NOT NULL,
                        final_test_acc REAL,
                        n_injected INTEGER,
                        false_positive_rate REAL,
                        error_message TEXT,
                        recorded_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                        UNIQUE (sweep_id, cell_key, seed)
                    )
                ''')

                conn.execute('''
                    CREATE INDEX IF NOT EXISTS idx_sweep_cell ON sweep_results(sweep_id, cell_key)
                ''')

                conn.commit()
                logger.debug(f"Sweep database initialized at {self.db_path}")

        except sqlite3.Error as e:
            logger.error(f"Failed to initialize sweep database: {e}")
            raise StorageError(f"cannot initialize sweep database {self.db_path}: {e}")

    def record_result(self, sweep_id: str, cell_key: str, parameter: str, value: Any, seed: int,
                      success: bool, final_test_acc: Optional[float] = None,
                      n_injected: Optional[int] = None, false_positive_rate: Optional[float] = None,
                      error_message: Optional[str] = None) -> bool:
        """Record one (cell, seed) outcome, replacing an earlier attempt"""
        try:
            with sqlite3.connect(self.db_path) as conn:
                conn.execute('''
                    INSERT OR REPLACE INTO sweep_results (
                        sweep_id, cell_key, parameter, value, seed, success,
                        final_test_acc, n_injected, false_positive_rate, error_message
                    ) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
                ''', (
                    sweep_id, cell_key, parameter, str(value), int(seed), success,
                    final_test_acc, n_injected, false_positive_rate, error_message
                ))
                conn.commit()

                logger.debug(f"Recorded sweep result {cell_key} seed={seed} (success: {success})")
                return True

        except sqlite3.Error as e:
            logger.error(f"Error recording sweep result {cell_key} seed={seed}: {e}")
            return False

    def completed_seeds(self, sweep_id: str, cell_key: str) -> Set[int]:
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.execute(
                    'SELECT seed FROM sweep_results WHERE sweep_id = ? AND cell_key = ? AND success = 1',
                    (sweep_id, cell_key)
                )
                return {int(row[0]) for row in cursor.fetchall()}

        except sqlite3.Error as e:
            logger.error(f"Error reading completed seeds for {cell_key}: {e}")
            return set()

    def get_results(self, sweep_id: str) -> List[Dict[str, Any]]:
        try:
            with sqlite3.connect(self.db_path) as conn:
                conn.row_factory = sqlite3.Row
                cursor = conn.execute('''
                    SELECT cell_key, parameter, value, seed, success, final_test_acc,
                           n_injected, false_positive_rate, error_message
                    FROM sweep_results
                    WHERE sweep_id = ?
                    ORDER BY cell_key, seed
                ''', (sweep_id,))
                return [dict(row) for row in cursor.fetchall()]

        except sqlite3.Error as e:
            raise StorageError(f"cannot read sweep results: {e}")

    def aggregate(self, sweep_id: str) -> List[Dict[str, Any]]:
        """Mean and sample stddev of final test accuracy per cell, sorted by cell key"""
        cells: Dict[str, Dict[str, Any]] = {}
        for row in self.get_results(sweep_id):
            cell = cells.setdefault(row['cell_key'], {
                'cell': row['cell_key'], 'parameter': row['parameter'], 'value': row['value'],
                'accuracies': [], 'false_positive_rates': [], 'failures': 0,
            })
            if row['success']:
                cell['accuracies'].append(row['final_test_acc'])
                cell['false_positive_rates'].append(row['false_positive_rate'] or 0.0)
            else:
                cell['failures'] += 1

        aggregated = []
        for key in sorted(cells):
            cell = cells[key]
            accs = np.asarray(cell['accuracies'], dtype=np.float64)
            aggregated.append({
                'cell': cell['cell'],
                'parameter': cell['parameter'],
                'value': cell['value'],
                'n_seeds': int(accs.size),
                'n_failed': cell['failures'],
                'mean_test_acc': float(accs.mean()) if accs.size else float('nan'),
                'std_test_acc': float(accs.std(ddof=1)) if accs.size > 1 else 0.0,
                'mean_false_positive_rate': (float(np.mean(cell['false_positive_rates']))
                                             if cell['false_positive_rates'] else 0.0),
            })
        return aggregated
