"""
Class-balanced support sampling, uniform unlabeled batches and the
global/local view generator.

All functions consume an explicit numpy Generator and never mutate the
arrays they are given.
"""

import math
from dataclasses import dataclass

import numpy as np

from src.core.exceptions import EmptyUnlabeledSet, InvalidViewCount, MissingClass
from src.core.schemas import ViewConfig
from src.data.datasets import LabeledSet, UnlabeledSet

DOMAIN_SOURCE = 0
DOMAIN_TARGET = 1


@dataclass
class SupportSample:
    X: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class UnlabeledBatch:
    ids: np.ndarray
    X: np.ndarray


@dataclass
class ViewSet:
    global_views: np.ndarray  # (n_global, n, d_in)
    local_views: np.ndarray   # (n_local, n, d_in)

    @property
    def n_local(self) -> int:
        return int(self.local_views.shape[0])


def _class_rows(labeled: LabeledSet, n_classes: int, domain: str):
    rows = []
    for c in range(n_classes):
        members = np.flatnonzero(labeled.labels == c)
        if members.size == 0:
            raise MissingClass(f"class {c} has no sample in the {domain} labeled set")
        rows.append(members)
    return rows


def sample_support(source: LabeledSet, target: LabeledSet, eta_sup: int,
                   rng: np.random.Generator, n_classes: int) -> SupportSample:
    """eta_sup draws per class per domain, with replacement, ordered (domain, class, draw)"""
    # Check both domains before consuming the generator
    per_domain = [(DOMAIN_SOURCE, source, _class_rows(source, n_classes, 'source')),
                  (DOMAIN_TARGET, target, _class_rows(target, n_classes, 'target'))]

    X, labels, domains, ids = [], [], [], []
    for tag, labeled, rows_by_class in per_domain:
        for c, members in enumerate(rows_by_class):
            picked = members[rng.integers(0, members.size, size=eta_sup)]
            X.append(labeled.X[picked])
            ids.append(labeled.ids[picked])
            labels.append(np.full(eta_sup, c, dtype=np.int64))
            domains.append(np.full(eta_sup, tag, dtype=np.int64))

    return SupportSample(
        X=np.concatenate(X),
        labels=np.concatenate(labels),
        domains=np.concatenate(domains),
        ids=np.concatenate(ids),
    )


def sample_unlabeled(unlabeled: UnlabeledSet, batch_size: int,
                     rng: np.random.Generator) -> UnlabeledBatch:
    n = len(unlabeled)
    if n == 0:
        raise EmptyUnlabeledSet("cannot sample from an empty unlabeled set")
    rows = rng.choice(n, size=batch_size, replace=n < batch_size)
    return UnlabeledBatch(ids=unlabeled.ids[rows].copy(), X=unlabeled.X[rows].copy())


def generate_views(x: np.ndarray, cfg: ViewConfig, rng: np.random.Generator) -> ViewSet:
    """Noisy global copies and masked noisy local copies of a sample or a batch of rows"""
    if cfg.n_global != 2:
        raise InvalidViewCount(f"exactly 2 global views required, got {cfg.n_global}")
    batch = np.atleast_2d(np.array(x, dtype=np.float64))
    n, d_in = batch.shape

    global_views = np.empty((cfg.n_global, n, d_in))
    for g in range(cfg.n_global):
        global_views[g] = batch + cfg.global_noise_sigma * rng.standard_normal((n, d_in))

    n_masked = math.ceil(round(cfg.local_mask_fraction * d_in, 9))
    local_views = np.empty((cfg.n_local, n, d_in))
    for v in range(cfg.n_local):
        view = batch.copy()
        if n_masked:
            for row in range(n):
                view[row, rng.choice(d_in, size=n_masked, replace=False)] = 0.0
        local_views[v] = view + cfg.local_noise_sigma * rng.standard_normal((n, d_in))

    return ViewSet(global_views=global_views, local_views=local_views)
