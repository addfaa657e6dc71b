"""
Synthetic domain-shift datasets and the split bundle used for training.

The source domain is a set of class-conditional clusters; the target domain
is the same class structure pushed through an affine shift (rotation in the
first two input coordinates, scale, translation) with fresh noise.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from sklearn.datasets import make_moons

from src.core.exceptions import InvalidSpec
from src.core.schemas import DatasetConfig

logger = logging.getLogger(__name__)


@dataclass
class LabeledSet:
    ids: np.ndarray
    X: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def class_counts(self, n_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=n_classes)


@dataclass
class UnlabeledSet:
    ids: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        self._row_of = {int(i): row for row, i in enumerate(self.ids)}

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def rows_for(self, ids: np.ndarray) -> np.ndarray:
        return np.array([self._row_of[int(i)] for i in ids], dtype=np.int64)


class AuditLabels:
    """True labels of the unlabeled target set; read only by the false-positive audit"""

    def __init__(self, ids: np.ndarray, labels: np.ndarray):
        self._labels: Dict[int, int] = {int(i): int(y) for i, y in zip(ids, labels)}

    def label_of(self, sample_id: int) -> int:
        return self._labels[sample_id]

    def as_arrays(self):
        ids = np.fromiter(self._labels.keys(), dtype=np.int64)
        return ids, np.fromiter(self._labels.values(), dtype=np.int64)

    def __len__(self) -> int:
        return len(self._labels)


@dataclass
class DatasetBundle:
    source: LabeledSet
    target_unlabeled: UnlabeledSet
    target_labeled: LabeledSet
    target_test: LabeledSet
    audit: AuditLabels
    n_classes: int
    spec: Optional[DatasetConfig] = None

    @property
    def d_in(self) -> int:
        return int(self.source.X.shape[1])

    def statistics(self) -> Dict[str, Dict[str, int]]:
        _, audit_labels = self.audit.as_arrays()
        stats = {}
        for name, labels in (('source', self.source.labels),
                             ('target_labeled', self.target_labeled.labels),
                             ('target_unlabeled', audit_labels),
                             ('target_test', self.target_test.labels)):
            counts = np.bincount(labels, minlength=self.n_classes)
            stats[name] = {'total': int(labels.size),
                           **{f'class_{c}': int(n) for c, n in enumerate(counts)}}
        return stats


def validate_spec(spec: DatasetConfig):
    if spec.kind not in ('gaussian', 'moons'):
        raise InvalidSpec('kind', f"unknown generator '{spec.kind}'")
    if spec.n_classes < 2:
        raise InvalidSpec('n_classes', "must be >= 2")
    if spec.kind == 'moons' and spec.n_classes != 2:
        raise InvalidSpec('n_classes', "moons generator has exactly 2 classes")
    if spec.d_in < 2:
        raise InvalidSpec('d_in', "must be >= 2")
    if spec.shots < 1:
        raise InvalidSpec('shots', "must be >= 1")
    for name in ('n_source', 'n_target_unlabeled', 'n_target_test'):
        if getattr(spec, name) < spec.n_classes:
            raise InvalidSpec(name, f"must be >= n_classes ({spec.n_classes})")
    if spec.noise_sigma < 0:
        raise InvalidSpec('noise_sigma', "must be >= 0")
    if spec.scale <= 0:
        raise InvalidSpec('scale', "must be > 0")
    if len(spec.translation) > spec.d_in:
        raise InvalidSpec('translation', f"has more than d_in={spec.d_in} entries")


def _balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % n_classes)


def _cluster_centers(spec: DatasetConfig) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(spec.n_classes) / spec.n_classes
    centers = np.zeros((spec.n_classes, spec.d_in))
    centers[:, 0] = spec.cluster_radius * np.cos(angles)
    centers[:, 1] = spec.cluster_radius * np.sin(angles)
    return centers


def _draw(spec: DatasetConfig, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Canonical (unshifted) inputs for the given labels"""
    n = labels.size
    X = np.zeros((n, spec.d_in))
    if spec.kind == 'gaussian':
        X = _cluster_centers(spec)[labels] + spec.noise_sigma * rng.standard_normal((n, spec.d_in))
    else:
        points, moon = make_moons(n_samples=2 * n + 2, noise=spec.noise_sigma,
                                  random_state=int(rng.integers(2**31 - 1)))
        pools = {c: list(points[moon == c]) for c in (0, 1)}
        cursor = {0: 0, 1: 0}
        for row, label in enumerate(labels):
            X[row, :2] = pools[label][cursor[label]]
            cursor[label] += 1
        X[:, :2] = X[:, :2] * (spec.cluster_radius / 2.0)
        if spec.d_in > 2:
            X[:, 2:] = spec.noise_sigma * rng.standard_normal((n, spec.d_in - 2))
    return X


def apply_shift(spec: DatasetConfig, X: np.ndarray) -> np.ndarray:
    """Rotate the first two coordinates, scale, then translate"""
    c, s = np.cos(spec.rotation), np.sin(spec.rotation)
    out = X.copy()
    out[:, 0] = c * X[:, 0] - s * X[:, 1]
    out[:, 1] = s * X[:, 0] + c * X[:, 1]
    translation = np.zeros(spec.d_in)
    translation[:len(spec.translation)] = spec.translation
    return spec.scale * out + translation


def generate(spec: DatasetConfig) -> DatasetBundle:
    """Deterministic bundle: S, T (with audit labels), T-hat_0 and the target test set"""
    validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    C = spec.n_classes

    source_labels = _balanced_labels(spec.n_source, C, rng)
    source_X = _draw(spec, source_labels, rng)

    # One target pool; the labeled split is drawn from it with its own seed
    n_labeled = spec.shots * C
    n_pool = n_labeled + spec.n_target_unlabeled
    pool_labels = np.concatenate([np.repeat(np.arange(C), spec.shots),
                                  _balanced_labels(spec.n_target_unlabeled, C, rng)])
    pool_X = apply_shift(spec, _draw(spec, pool_labels, rng))
    test_labels = _balanced_labels(spec.n_target_test, C, rng)
    test_X = apply_shift(spec, _draw(spec, test_labels, rng))

    split_rng = np.random.default_rng(spec.seed if spec.split_seed < 0 else spec.split_seed)
    labeled_rows = np.sort(np.concatenate([
        split_rng.choice(np.flatnonzero(pool_labels == c), size=spec.shots, replace=False)
        for c in range(C)
    ]))
    unlabeled_rows = np.setdiff1d(np.arange(n_pool), labeled_rows)

    source_ids = np.arange(spec.n_source, dtype=np.int64)
    pool_ids = spec.n_source + np.arange(n_pool, dtype=np.int64)
    test_ids = spec.n_source + n_pool + np.arange(spec.n_target_test, dtype=np.int64)

    bundle = DatasetBundle(
        source=LabeledSet(source_ids, source_X, source_labels.astype(np.int64)),
        target_unlabeled=UnlabeledSet(pool_ids[unlabeled_rows], pool_X[unlabeled_rows]),
        target_labeled=LabeledSet(pool_ids[labeled_rows], pool_X[labeled_rows],
                                  pool_labels[labeled_rows].astype(np.int64)),
        target_test=LabeledSet(test_ids, test_X, test_labels.astype(np.int64)),
        audit=AuditLabels(pool_ids[unlabeled_rows], pool_labels[unlabeled_rows]),
        n_classes=C,
        spec=spec,
    )
    logger.info(
        f"Generated {spec.kind} bundle: |S|={len(bundle.source)} |T|={len(bundle.target_unlabeled)} "
        f"|T_hat_0|={len(bundle.target_labeled)} |test|={len(bundle.target_test)}",
        extra={'extra_data': {'seed': spec.seed, 'rotation': spec.rotation, 'n_classes': C}}
    )
    return bundle
