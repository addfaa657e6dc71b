"""
Similarity-based soft pseudo-labels, the EMA confidence store and the
injection/removal state machine over the labeled target set.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.core.exceptions import InconsistentState, InvalidThreshold, ShapeMismatch, StorageError
from src.data.datasets import LabeledSet, UnlabeledSet
from src.numerics import core_math

logger = logging.getLogger(__name__)


@dataclass
class PseudoLabelCache:
    unit_u: np.ndarray
    unit_sup: np.ndarray
    raw_u: np.ndarray
    raw_sup: np.ndarray
    weights: np.ndarray
    support_onehot: np.ndarray
    tau: float


class SoftPseudoLabeler:
    """y = softmax(unit(z) . unit(z_sup)^T / tau) @ onehot(y_sup), with a backward pass"""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes

    def forward(self, Z_u: np.ndarray, Z_sup: np.ndarray, support_labels: Sequence[int],
                tau: float) -> Tuple[np.ndarray, PseudoLabelCache]:
        Z_u = np.atleast_2d(np.asarray(Z_u, dtype=np.float64))
        Z_sup = np.atleast_2d(np.asarray(Z_sup, dtype=np.float64))
        if Z_u.shape[1] != Z_sup.shape[1]:
            raise ShapeMismatch(f"unlabeled dim {Z_u.shape[1]} vs support dim {Z_sup.shape[1]}")
        if len(support_labels) != Z_sup.shape[0]:
            raise ShapeMismatch(f"{Z_sup.shape[0]} support embeddings but {len(support_labels)} labels")

        unit_u = core_math.l2_normalize(Z_u)
        unit_sup = core_math.l2_normalize(Z_sup)
        weights = core_math.softmax_tau(unit_u @ unit_sup.T, tau)
        onehot = core_math.one_hot(support_labels, self.n_classes)
        labels = weights @ onehot
        return labels, PseudoLabelCache(unit_u, unit_sup, Z_u, Z_sup, weights, onehot, tau)

    def backward(self, cache: PseudoLabelCache, grad_labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Gradients w.r.t. the raw unlabeled and support embeddings"""
        grad_weights = grad_labels @ cache.support_onehot.T
        s = cache.weights
        grad_logits = s * (grad_weights - np.sum(s * grad_weights, axis=1, keepdims=True))
        grad_sims = grad_logits / cache.tau
        grad_unit_u = grad_sims @ cache.unit_sup
        grad_unit_sup = grad_sims.T @ cache.unit_u
        return (core_math.l2_normalize_backward(cache.raw_u, grad_unit_u),
                core_math.l2_normalize_backward(cache.raw_sup, grad_unit_sup))


def compute_soft_pseudo_labels(Z_u: np.ndarray, support_embeddings: np.ndarray,
                               support_labels: Sequence[int], n_classes: int,
                               tau_pl: float) -> np.ndarray:
    labels, _ = SoftPseudoLabeler(n_classes).forward(Z_u, support_embeddings, support_labels, tau_pl)
    return labels


class PseudoLabelStore:
    """Per-sample EMA of sharpened pseudo-labels, keyed by sample id"""

    def __init__(self, n_classes: int, rho: float = 0.7, use_ema: bool = True):
        if not 0.0 < rho <= 1.0:
            raise ValueError(f"rho must be in (0, 1], got {rho}")
        self.n_classes = n_classes
        self.rho = rho
        self.use_ema = use_ema
        self.entries: Dict[int, np.ndarray] = {}

    def ema_update(self, sample_id: int, sharpened: np.ndarray) -> np.ndarray:
        """First visit stores the vector as-is; later visits blend with momentum rho"""
        sharpened = np.array(sharpened, dtype=np.float64)
        old = self.entries.get(sample_id)
        if old is None or not self.use_ema:
            entry = sharpened
        else:
            entry = self.rho * sharpened + (1.0 - self.rho) * old
        self.entries[sample_id] = entry
        return entry

    def update_batch(self, sample_ids: Sequence[int], sharpened: np.ndarray):
        # Sequential so repeated ids in a with-replacement batch compose
        for sample_id, row in zip(sample_ids, sharpened):
            self.ema_update(int(sample_id), row)

    def __contains__(self, sample_id: int) -> bool:
        return sample_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, sample_id: int) -> Optional[np.ndarray]:
        return self.entries.get(sample_id)

    def confidence(self, sample_id: int) -> float:
        return float(np.max(self.entries[sample_id]))

    def predicted_class(self, sample_id: int) -> int:
        return int(np.argmax(self.entries[sample_id]))


@dataclass
class InjectionDecision:
    inject: List[Tuple[int, int]] = field(default_factory=list)
    remove: List[Tuple[int, int]] = field(default_factory=list)
    epoch: int = 0


class LabeledTargetSet:
    """T-hat: the frozen original labels plus injected (id -> pseudo-label) pairs"""

    def __init__(self, original: LabeledSet, injected: Optional[Dict[int, int]] = None):
        self.original = original
        self.injected: Dict[int, int] = dict(sorted((injected or {}).items()))

    @property
    def original_ids(self) -> frozenset:
        return frozenset(int(i) for i in self.original.ids)

    def members(self) -> Dict[int, int]:
        """id -> label for every member"""
        out = {int(i): int(y) for i, y in zip(self.original.ids, self.original.labels)}
        out.update(self.injected)
        return out

    def __len__(self) -> int:
        return len(self.original) + len(self.injected)

    def membership_key(self) -> Tuple[Tuple[int, int], ...]:
        return tuple(sorted(self.members().items()))

    def to_labeled_set(self, unlabeled: UnlabeledSet) -> LabeledSet:
        """Materialize originals followed by injected samples in id order"""
        if not self.injected:
            return self.original
        ids = np.fromiter(self.injected.keys(), dtype=np.int64)
        labels = np.fromiter(self.injected.values(), dtype=np.int64)
        rows = unlabeled.rows_for(ids)
        return LabeledSet(
            ids=np.concatenate([self.original.ids, ids]),
            X=np.concatenate([self.original.X, unlabeled.X[rows]]),
            labels=np.concatenate([self.original.labels, labels]),
        )


def _check_gamma(gamma: float):
    if not 0.0 < gamma <= 1.0:
        raise InvalidThreshold(f"gamma must be in (0, 1], got {gamma}")


def select_injections(store: PseudoLabelStore, unlabeled_ids: Iterable[int],
                      gamma: float) -> List[Tuple[int, int]]:
    """(id, argmax) for visited unlabeled samples whose EMA confidence is >= gamma"""
    _check_gamma(gamma)
    selected = []
    for sample_id in sorted(int(i) for i in unlabeled_ids):
        if sample_id in store and store.confidence(sample_id) >= gamma:
            selected.append((sample_id, store.predicted_class(sample_id)))
    return selected


def select_removals(target_set: LabeledTargetSet, store: PseudoLabelStore,
                    gamma: float) -> List[Tuple[int, int]]:
    """Injected samples whose confidence fell strictly below gamma, with their assigned label"""
    _check_gamma(gamma)
    removals = []
    for sample_id, assigned in target_set.injected.items():
        if sample_id not in store:
            raise InconsistentState(f"injected sample {sample_id} has no store entry")
        if store.confidence(sample_id) < gamma:
            removals.append((sample_id, assigned))
    return removals


def apply_update(target_set: LabeledTargetSet, decision: InjectionDecision, epoch: int,
                 warmup_epochs: int) -> LabeledTargetSet:
    """(T-hat minus removals) union injections once epoch >= warmup_epochs"""
    if epoch < warmup_epochs:
        return target_set

    protected = target_set.original_ids
    injected = dict(target_set.injected)
    for sample_id, _ in decision.remove:
        injected.pop(sample_id, None)
    for sample_id, label in decision.inject:
        if sample_id in protected:
            raise InconsistentState(f"sample {sample_id} already belongs to the original labeled set")
        injected[sample_id] = label
    return LabeledTargetSet(target_set.original, injected)


def decide(store: PseudoLabelStore, unlabeled_ids: Iterable[int], target_set: LabeledTargetSet,
           gamma: float, epoch: int, removal_enabled: bool = True) -> InjectionDecision:
    inject = select_injections(store, unlabeled_ids, gamma)
    remove = select_removals(target_set, store, gamma) if removal_enabled else []
    return InjectionDecision(inject=inject, remove=remove, epoch=epoch)


def export_store_csv(store: PseudoLabelStore, target_set: LabeledTargetSet, path: Path):
    """One row per stored sample: id, p0..p{C-1}, injected, assigned_label (-1 when not injected)"""
    fieldnames = ['id'] + [f'p{c}' for c in range(store.n_classes)] + ['injected', 'assigned_label']
    try:
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(fieldnames)
            for sample_id in sorted(store.entries):
                assigned = target_set.injected.get(sample_id)
                writer.writerow([sample_id] + [repr(float(p)) for p in store.entries[sample_id]]
                                + [int(assigned is not None), -1 if assigned is None else assigned])
    except OSError as e:
        raise StorageError(f"cannot write pseudo-label snapshot {path}: {e}")
    logger.debug(f"Wrote {len(store)} pseudo-label rows to {path}")
