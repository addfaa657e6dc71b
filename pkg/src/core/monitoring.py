"""
Training metrics: per-iteration loss and gradient-norm accumulation,
per-epoch injection dynamics, and warnings when a run drifts.
"""

import logging
import threading
from collections import defaultdict
from typing import Any, Dict, List, Optional

from src.core.schemas import LOSS_NAMES
from src.shared.utils import MetricsCollector

logger = logging.getLogger(__name__)


class EpochAccumulator:
    """Running sums over the iterations of one epoch"""

    def __init__(self):
        self.iterations = 0
        self.loss_sums: Dict[str, float] = defaultdict(float)
        self.total_sum = 0.0
        self.grad_norm_sums: Dict[str, float] = defaultdict(float)

    def add(self, parts: Dict[str, float], total: float, grad_norms: Dict[str, float]):
        self.iterations += 1
        for name in LOSS_NAMES:
            self.loss_sums[name] += parts.get(name, 0.0)
        self.total_sum += total
        for name, norm in grad_norms.items():
            self.grad_norm_sums[name] += norm

    def mean_losses(self) -> Dict[str, float]:
        n = max(self.iterations, 1)
        return {name: self.loss_sums[name] / n for name in LOSS_NAMES}

    def mean_total(self) -> float:
        return self.total_sum / max(self.iterations, 1)

    def mean_grad_norms(self) -> Dict[str, float]:
        n = max(self.iterations, 1)
        return {name: total / n for name, total in sorted(self.grad_norm_sums.items())}


class TrainingMonitor:
    """Collects epoch-level numbers for the logs and the in-process metrics registry"""

    def __init__(self, false_positive_alert: float = 0.5):
        self.false_positive_alert = false_positive_alert
        self.epochs_completed = 0
        self.cumulative_injections = 0
        self.cumulative_removals = 0
        self.best_test_acc: Optional[float] = None
        self.history: List[Dict[str, Any]] = []
        self.alerts: List[Dict[str, Any]] = []
        self.metrics = MetricsCollector()
        self._lock = threading.Lock()

    def record_epoch(self, report, grad_norms: Dict[str, float]):
        with self._lock:
            self.epochs_completed += 1
            self.cumulative_injections += report.n_inject
            self.cumulative_removals += report.n_remove
            if self.best_test_acc is None or report.test_acc > self.best_test_acc:
                self.best_test_acc = report.test_acc
            self.history.append({'epoch': report.epoch, 'test_acc': report.test_acc,
                                 'n_labeled_target': report.n_labeled_target})

            self.metrics.gauge('test_acc', report.test_acc)
            self.metrics.gauge('loss_total', report.loss_total)
            self.metrics.gauge('labeled_target_size', report.n_labeled_target)
            self.metrics.increment('injections_total', report.n_inject)
            self.metrics.increment('removals_total', report.n_remove)
            for name, norm in grad_norms.items():
                self.metrics.gauge('grad_norm', norm, labels={'loss': name})

        logger.info(
            f"Epoch {report.epoch}: loss={report.loss_total:.4f} test_acc={report.test_acc:.4f} "
            f"inject={report.n_inject} remove={report.n_remove} |T_hat|={report.n_labeled_target} "
            f"false_pos={report.n_false_positive}",
            extra={'extra_data': {**report.as_dict(), 'grad_norms': grad_norms}}
        )
        self._check_false_positive_rate(report)

    def _check_false_positive_rate(self, report):
        injected = report.n_labeled_target - report.n_original_target
        if injected <= 0:
            return
        rate = report.n_false_positive / injected
        if rate > self.false_positive_alert:
            self._add_alert('false_positives',
                            f'{rate:.1%} of injected samples carry a wrong label at epoch {report.epoch}',
                            {'rate': rate, 'injected': injected, 'threshold': self.false_positive_alert})

    def _add_alert(self, alert_type: str, message: str, context: Dict[str, Any] = None):
        alert = {'type': alert_type, 'message': message, 'context': context or {}}
        if any(a['type'] == alert_type and a['message'] == message for a in self.alerts):
            return
        self.alerts.append(alert)
        logger.warning(f"Alert generated: {alert_type} - {message}", extra={'extra_data': alert})

    def get_summary(self) -> Dict[str, Any]:
        with self._lock:
            return {
                'epochs_completed': self.epochs_completed,
                'cumulative_injections': self.cumulative_injections,
                'cumulative_removals': self.cumulative_removals,
                'best_test_acc': self.best_test_acc,
                'alerts': len(self.alerts),
                'metrics': self.metrics.snapshot(),
            }
