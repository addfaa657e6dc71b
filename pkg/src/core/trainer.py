"""
The SPI training loop.

Each iteration samples a class-balanced support set from S and T-hat and an
unlabeled batch from T, builds the views, evaluates the weighted objective,
updates the pseudo-label store from the first global view and takes one SGD
step. At the end of each epoch (or after every iteration, depending on
`injection_interval`) confident unlabeled samples are injected into T-hat
and decayed ones removed.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from src.core.config import Config
from src.core.exceptions import EmptyTestSet, InconsistentState, NumericalError, StorageError
from src.core.monitoring import EpochAccumulator, TrainingMonitor
from src.core.objective import IterationBatch, ObjectiveResult, SpiObjective
from src.data.datasets import DatasetBundle, LabeledSet
from src.engine import model
from src.engine.model import ModelParams
from src.engine.optim import OptimizerState, Schedule, schedule_value, sgd_step
from src.engine.pseudo_labels import (
    LabeledTargetSet, PseudoLabelStore, apply_update, decide, export_store_csv
)
from src.engine.sampling import DOMAIN_SOURCE, sample_support, sample_unlabeled, generate_views
from src.numerics import core_math
from src.shared.utils import PerformanceLogger

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ['epoch', 'loss_con', 'loss_ils', 'loss_ida', 'loss_cls', 'loss_total', 'test_acc',
                   'n_inject', 'n_remove', 'n_labeled_target', 'n_false_positive', 'lr', 'tau_pl']
METRICS_FILE = 'metrics.csv'
SUMMARY_FILE = 'summary.json'
CHECKPOINT_FILE = 'model.ckpt'
PSEUDO_LABELS_FILE = 'pseudo_labels.csv'


@dataclass
class EpochReport:
    epoch: int
    loss_con: float
    loss_ils: float
    loss_ida: float
    loss_cls: float
    loss_total: float
    test_acc: float
    n_inject: int
    n_remove: int
    n_labeled_target: int
    n_false_positive: int
    lr: float
    tau_pl: float
    n_original_target: int = 0

    def as_row(self) -> List[str]:
        row = []
        for column in METRICS_COLUMNS:
            value = getattr(self, column)
            row.append(repr(float(value)) if isinstance(value, float) else str(value))
        return row

    def as_dict(self) -> Dict[str, Any]:
        return {column: getattr(self, column) for column in METRICS_COLUMNS}


@dataclass
class MembershipChange:
    n_inject: int = 0
    n_remove: int = 0

    def __iadd__(self, other: 'MembershipChange') -> 'MembershipChange':
        self.n_inject += other.n_inject
        self.n_remove += other.n_remove
        return self


def evaluate(params: ModelParams, test: LabeledSet) -> float:
    """Top-1 accuracy of argmax h(x) on the test set"""
    if len(test) == 0:
        raise EmptyTestSet("test set is empty")
    predictions = model.predict(params, test.X)
    return float(np.count_nonzero(predictions == test.labels)) / len(test)


def per_class_accuracy(params: ModelParams, test: LabeledSet, n_classes: int) -> Dict[int, float]:
    if len(test) == 0:
        raise EmptyTestSet("test set is empty")
    predictions = model.predict(params, test.X)
    out = {}
    for c in range(n_classes):
        members = test.labels == c
        if np.any(members):
            out[c] = float(np.count_nonzero(predictions[members] == c)) / int(np.count_nonzero(members))
    return out


class Trainer:
    """Owns the parameters, optimizer state, pseudo-label store and T-hat for one run"""

    def __init__(self, config: Config, bundle: DatasetBundle):
        self.config = config
        self.cfg = config.training
        self.bundle = bundle
        self.n_classes = bundle.n_classes

        init_rng = np.random.default_rng([self.cfg.seed, 0])
        self.params = model.init_params(bundle.d_in, config.model.hidden, config.model.embedding_dim,
                                        self.n_classes, init_rng)
        self.optimizer = OptimizerState.for_params(self.params, lr=0.0, momentum=self.cfg.momentum,
                                                   weight_decay=self.cfg.weight_decay)
        self.objective = SpiObjective(self.cfg, self.n_classes)
        self.store = PseudoLabelStore(self.n_classes, rho=self.cfg.rho, use_ema=self.cfg.use_ema)
        self.target_set = LabeledTargetSet(bundle.target_labeled)
        self.monitor = TrainingMonitor()

        self.iters_per_epoch = self.cfg.iters_per_epoch or math.ceil(
            len(bundle.target_unlabeled) / self.cfg.batch_unlabeled)
        self.lr_schedule = Schedule(self.cfg.lr_start, self.cfg.lr_peak, self.cfg.lr_floor,
                                    min(self.cfg.warmup_epochs, self.cfg.epochs), self.cfg.epochs)
        self.tau_schedule = Schedule(self.cfg.tau_pl_start, self.cfg.tau_pl_start, self.cfg.tau_pl_floor,
                                     0, self.cfg.epochs)

        self.epoch = 0
        self.global_iteration = 0
        self.reports: List[EpochReport] = []
        self._source_labels = {int(i): int(y) for i, y in zip(bundle.source.ids, bundle.source.labels)}
        self._unlabeled_ids = [int(i) for i in bundle.target_unlabeled.ids]

    def schedules_at(self, epoch: int, iteration: int):
        fraction = iteration / self.iters_per_epoch
        return schedule_value(self.lr_schedule, epoch, fraction), schedule_value(self.tau_schedule, epoch, fraction)

    def sample_batch(self, rng: np.random.Generator) -> IterationBatch:
        labeled_target = self.target_set.to_labeled_set(self.bundle.target_unlabeled)
        support = sample_support(self.bundle.source, labeled_target, self.cfg.eta_sup, rng, self.n_classes)
        unlabeled = sample_unlabeled(self.bundle.target_unlabeled, self.cfg.batch_unlabeled, rng)
        views = generate_views(unlabeled.X, self.config.views, rng)
        return IterationBatch(support=support, unlabeled=unlabeled, views=views)

    def _check_membership(self, batch: IterationBatch):
        """Classifier inputs must come from S or the current T-hat with matching labels"""
        members = self.target_set.members()
        support = batch.support
        for sample_id, label, domain in zip(support.ids, support.labels, support.domains):
            known = self._source_labels if domain == DOMAIN_SOURCE else members
            if known.get(int(sample_id)) != int(label):
                raise InconsistentState(
                    f"support sample {int(sample_id)} (label {int(label)}) is not a labeled member")

    def train_iteration(self, batch: IterationBatch, lr: float, tau_pl: float) -> ObjectiveResult:
        self._check_membership(batch)
        result = self.objective.evaluate(self.params, batch, tau_pl, with_pseudo_labels=self.cfg.injects)

        if self.cfg.injects:
            sharpened = core_math.sharpen(result.global_pseudo[:, 0], self.cfg.tau_sharp)
            self.store.update_batch(batch.unlabeled.ids, sharpened)

        self.optimizer.lr = lr
        self.params = sgd_step(self.params, result.grads, self.optimizer)
        self.global_iteration += 1
        return result

    def update_target_set(self, epoch: int) -> MembershipChange:
        """Inject and remove against the current store; no-op before warmup or when injection is off"""
        if not self.cfg.injects or epoch < self.cfg.warmup_epochs:
            return MembershipChange()
        decision = decide(self.store, self._unlabeled_ids, self.target_set, self.cfg.gamma,
                          epoch, removal_enabled=self.cfg.removal_enabled)
        before = self.target_set.injected
        self.target_set = apply_update(self.target_set, decision, epoch, self.cfg.warmup_epochs)
        after = self.target_set.injected
        return MembershipChange(n_inject=sum(1 for i in after if i not in before),
                                n_remove=sum(1 for i in before if i not in after))

    def false_positives(self) -> int:
        audit = self.bundle.audit
        return sum(1 for sample_id, assigned in self.target_set.injected.items()
                   if assigned != audit.label_of(sample_id))

    def end_of_epoch(self, epoch: int, accumulator: EpochAccumulator, change: MembershipChange,
                     lr: float, tau_pl: float) -> EpochReport:
        if self.cfg.injection_interval == 'epoch':
            change = self.update_target_set(epoch)

        losses = accumulator.mean_losses()
        report = EpochReport(
            epoch=epoch,
            loss_con=losses['con'],
            loss_ils=losses['ils'],
            loss_ida=losses['ida'],
            loss_cls=losses['cls'],
            loss_total=accumulator.mean_total(),
            test_acc=evaluate(self.params, self.bundle.target_test),
            n_inject=change.n_inject,
            n_remove=change.n_remove,
            n_labeled_target=len(self.target_set),
            n_false_positive=self.false_positives(),
            lr=float(lr),
            tau_pl=float(tau_pl),
            n_original_target=len(self.target_set.original),
        )
        self.monitor.record_epoch(report, accumulator.mean_grad_norms())
        return report

    def run_epoch(self, epoch: int) -> EpochReport:
        rng = np.random.default_rng([self.cfg.seed, epoch + 1])
        accumulator = EpochAccumulator()
        change = MembershipChange()
        epoch_lr, epoch_tau = self.schedules_at(epoch, 0)
        key_at_start = self.target_set.membership_key()

        with PerformanceLogger(f"epoch {epoch}", logger, extra_data={'epoch': epoch}):
            for iteration in range(self.iters_per_epoch):
                lr, tau_pl = self.schedules_at(epoch, iteration)
                batch = self.sample_batch(rng)
                try:
                    result = self.train_iteration(batch, lr, tau_pl)
                except NumericalError as e:
                    raise e.located(epoch, iteration) from e
                accumulator.add(result.parts, result.value, result.grad_norms)

                if self.cfg.injection_interval == 'iteration':
                    change += self.update_target_set(epoch)
                elif self.target_set.membership_key() != key_at_start:
                    raise InconsistentState(f"labeled target set changed mid-epoch at iteration {iteration}")

            report = self.end_of_epoch(epoch, accumulator, change, epoch_lr, epoch_tau)
        return report

    def run(self, output_dir: Optional[Path] = None) -> List[EpochReport]:
        """Train for every epoch; with `output_dir`, write metrics, summary, checkpoint and store snapshot"""
        output_dir = Path(output_dir) if output_dir is not None else None
        if output_dir is not None:
            self._write_metrics_header(output_dir / METRICS_FILE)

        logger.info(
            f"Training {model.describe(self.params)} for {self.cfg.epochs} epochs x {self.iters_per_epoch} iterations",
            extra={'extra_data': self.config.get_summary()}
        )
        for epoch in range(self.cfg.epochs):
            self.epoch = epoch
            report = self.run_epoch(epoch)
            self.reports.append(report)
            if output_dir is not None:
                self._append_metrics_row(output_dir / METRICS_FILE, report)

        if output_dir is not None:
            model.save_checkpoint(self.params, output_dir / CHECKPOINT_FILE, self.cfg.seed, self.cfg.epochs)
            export_store_csv(self.store, self.target_set, output_dir / PSEUDO_LABELS_FILE)
            self._write_summary(output_dir / SUMMARY_FILE)
        return self.reports

    def _write_metrics_header(self, path: Path):
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', newline='', encoding='utf-8') as f:
                csv.writer(f, lineterminator='\n').writerow(METRICS_COLUMNS)
        except OSError as e:
            raise StorageError(f"cannot write metrics {path}: {e}")

    def _append_metrics_row(self, path: Path, report: EpochReport):
        try:
            with open(path, 'a', newline='', encoding='utf-8') as f:
                csv.writer(f, lineterminator='\n').writerow(report.as_row())
        except OSError as e:
            raise StorageError(f"cannot append metrics {path}: {e}")

    def summary(self) -> Dict[str, Any]:
        n_injected = len(self.target_set.injected)
        false_positives = self.false_positives()
        monitor = self.monitor.get_summary()
        return {
            'config': self.config.resolved(),
            'epochs': self.cfg.epochs,
            'iters_per_epoch': self.iters_per_epoch,
            'final': self.reports[-1].as_dict() if self.reports else None,
            'injection': {
                'cumulative_injections': monitor['cumulative_injections'],
                'cumulative_removals': monitor['cumulative_removals'],
                'n_injected_final': n_injected,
                'false_positive_rate': false_positives / n_injected if n_injected else 0.0,
            },
            'monitor': {
                'best_test_acc': monitor['best_test_acc'],
                'alerts': monitor['alerts'],
                'metrics': monitor['metrics'],
            },
        }

    def _write_summary(self, path: Path):
        try:
            with open(path, 'w', encoding='utf-8') as f:
                json.dump(self.summary(), f, indent=2, sort_keys=True)
                f.write('\n')
        except OSError as e:
            raise StorageError(f"cannot write summary {path}: {e}")


def run(config: Config, bundle: DatasetBundle, output_dir: Optional[Path] = None) -> List[EpochReport]:
    return Trainer(config, bundle).run(output_dir)
