"""
Central finite-difference checks for every loss and for the full objective
through the MLP.

Losses are looked up through the `losses` module at call time, so a patched
loss is what gets checked.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from src.core.exceptions import GradientCheckFailure
from src.core.objective import IterationBatch, SpiObjective
from src.core.schemas import TrainConfig, ViewConfig
from src.engine import model
from src.engine.model import ModelParams
from src.engine.sampling import DOMAIN_SOURCE, DOMAIN_TARGET, SupportSample, UnlabeledBatch, ViewSet
from src.numerics import losses

logger = logging.getLogger(__name__)

LOSS_STEP = 1e-5
LOSS_TOLERANCE = 1e-4
END_TO_END_STEP = 1e-4
END_TO_END_TOLERANCE = 1e-3
ABSOLUTE_FLOOR = 1e-8
GRAD_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    worst_config: int
    worst_coordinate: Tuple[int, ...]
    tolerance: float
    n_configs: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def line(self) -> str:
        verdict = 'PASS' if self.passed else 'FAIL'
        return (f"{verdict} {self.name}: max relative error {self.max_rel_error:.3e} "
                f"(tolerance {self.tolerance:.0e}, {self.n_configs} configurations, "
                f"worst config {self.worst_config} coordinate {self.worst_coordinate})")

    def raise_if_failed(self):
        if not self.passed:
            raise GradientCheckFailure(self.name, (self.worst_config, self.worst_coordinate),
                                       self.max_rel_error)


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, step: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat_x.size):
        original = flat_x[i]
        flat_x[i] = original + step
        plus = f(x)
        flat_x[i] = original - step
        minus = f(x)
        flat_x[i] = original
        flat_grad[i] = (plus - minus) / (2.0 * step)
    return grad


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(|a|, |n|) where the gradient is above the floor and the gap above ABSOLUTE_FLOOR"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    gap = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    errors = np.where(scale > GRAD_FLOOR, gap / np.maximum(scale, GRAD_FLOOR), 0.0)
    return np.where(gap > ABSOLUTE_FLOOR, errors, 0.0)


class _Tracker:
    def __init__(self, name: str, tolerance: float):
        self.name = name
        self.tolerance = tolerance
        self.worst = 0.0
        self.worst_config = 0
        self.worst_coordinate: Tuple[int, ...] = ()
        self.n_configs = 0

    def add(self, config_index: int, analytic: np.ndarray, numeric: np.ndarray):
        errors = relative_errors(analytic, numeric)
        self.n_configs += 1
        if errors.size == 0:
            return
        worst_here = float(errors.max())
        if self.n_configs == 1 or worst_here > self.worst:
            self.worst = worst_here
            self.worst_config = config_index
            position = np.unravel_index(int(np.argmax(errors)), errors.shape)
            self.worst_coordinate = tuple(int(p) for p in position)

    def result(self) -> GradCheckResult:
        return GradCheckResult(self.name, self.worst, self.worst_config, self.worst_coordinate,
                               self.tolerance, self.n_configs)


def _simplex(rng: np.random.Generator, shape) -> np.ndarray:
    """Random probability rows bounded away from zero"""
    raw = rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])
    return 0.8 * raw + 0.2 / shape[-1]


def _balanced_labels(rng: np.random.Generator, n: int, n_classes: int) -> np.ndarray:
    """Every class at least twice so each anchor has a positive"""
    labels = np.arange(n) % n_classes
    return rng.permutation(labels)


def check_contrastive(rng: np.random.Generator, n_configs: int) -> GradCheckResult:
    tracker = _Tracker('con', LOSS_TOLERANCE)
    for index in range(n_configs):
        n_classes = int(rng.integers(2, 4))
        n = int(rng.integers(2 * n_classes, 7))
        d = int(rng.integers(2, 9))
        labels = _balanced_labels(rng, n, n_classes)
        Z = rng.standard_normal((n, d))
        normalize = bool(index % 2 == 0)
        anchor_mode = 'as_written' if index % 4 < 2 else 'standard'
        tau = 0.1 if normalize else 1.0

        def f(z):
            return losses.supervised_contrastive(z, labels, tau, normalize=normalize,
                                                 anchor_mode=anchor_mode).value

        analytic = losses.supervised_contrastive(Z, labels, tau, normalize=normalize,
                                                 anchor_mode=anchor_mode).grad
        tracker.add(index, analytic, central_difference(f, Z, LOSS_STEP))
    return tracker.result()


def check_instance_similarity(rng: np.random.Generator, n_configs: int) -> GradCheckResult:
    tracker = _Tracker('ils', LOSS_TOLERANCE)
    for index in range(n_configs):
        B = int(rng.integers(1, 5))
        C = int(rng.integers(2, 6))
        n_local = int(rng.integers(0, 4))
        G = _simplex(rng, (B, 2, C))
        L = _simplex(rng, (B, n_local, C))
        tau_sharp = float(rng.uniform(0.2, 1.0))
        targets = losses.instance_similarity_targets(G, n_local, tau_sharp)
        predictions = np.concatenate([G, L], axis=1)

        def f(p):
            return losses.instance_similarity_loss(p[:, :2], p[:, 2:], tau_sharp, targets=targets).value

        analytic = losses.instance_similarity_loss(G, L, tau_sharp, targets=targets).grad
        tracker.add(index, analytic, central_difference(f, predictions, LOSS_STEP))
    return tracker.result()


def check_intra_domain(rng: np.random.Generator, n_configs: int) -> GradCheckResult:
    tracker = _Tracker('ida', LOSS_TOLERANCE)
    for index in range(n_configs):
        n = int(rng.integers(2, 7))
        d = int(rng.integers(2, 9))
        Z = rng.standard_normal((n, d))
        upper = np.triu(rng.integers(0, 2, size=(n, n)), 1)
        M = upper + upper.T + np.eye(n, dtype=np.int64)

        def f(z):
            return losses.intra_domain_alignment(z, M).value

        analytic = losses.intra_domain_alignment(Z, M).grad
        tracker.add(index, analytic, central_difference(f, Z, LOSS_STEP))
    return tracker.result()


def check_classification(rng: np.random.Generator, n_configs: int) -> GradCheckResult:
    tracker = _Tracker('cls', LOSS_TOLERANCE)
    for index in range(n_configs):
        n = int(rng.integers(1, 7))
        C = int(rng.integers(2, 6))
        logits = 2.0 * rng.standard_normal((n, C))
        labels = rng.integers(0, C, size=n)
        alpha = float(rng.choice([0.0, 0.1, 0.3]))

        def f(x):
            return losses.classification_loss(x, labels, alpha, C).value

        analytic = losses.classification_loss(logits, labels, alpha, C).grad
        tracker.add(index, analytic, central_difference(f, logits, LOSS_STEP))
    return tracker.result()


def _well_conditioned(params: ModelParams, X: np.ndarray) -> bool:
    """ReLU kinks out of finite-difference reach, an active hidden unit per row, no near-zero embedding"""
    Z, cache = model.forward_features(params, X, return_cache=True)
    for pre in cache.pre_activations[:-1]:
        if np.min(np.abs(pre)) <= 1e-2 or not np.all(np.max(pre, axis=1) > 1e-2):
            return False
    return bool(np.min(np.linalg.norm(Z, axis=1)) > 1e-1)


def _tiny_problem(rng: np.random.Generator):
    """Small model, support set and unlabeled views with ReLU pre-activations away from zero"""
    d_in, d, C, B, hidden = 2, 4, 3, int(rng.integers(2, 5)), [5]
    cfg = TrainConfig(top_k=2, eta_sup=1, batch_unlabeled=B)
    views = ViewConfig(n_local=1)
    while True:
        params = model.init_params(d_in, hidden, d, C, rng)
        labels = np.tile(np.arange(C), 2)
        support = SupportSample(
            X=rng.standard_normal((2 * C, d_in)),
            labels=labels,
            domains=np.repeat([DOMAIN_SOURCE, DOMAIN_TARGET], C),
            ids=np.arange(2 * C),
        )
        X_u = rng.standard_normal((B, d_in))
        view_set = ViewSet(global_views=X_u[None] + 0.1 * rng.standard_normal((2, B, d_in)),
                           local_views=X_u[None] + 0.1 * rng.standard_normal((views.n_local, B, d_in)))
        batch = IterationBatch(support, UnlabeledBatch(np.arange(B), X_u), view_set)

        stacked = np.concatenate([support.X, view_set.global_views.reshape(-1, d_in),
                                  view_set.local_views.reshape(-1, d_in)])
        if _well_conditioned(params, stacked):
            return SpiObjective(cfg, C), params, batch


def check_end_to_end(rng: np.random.Generator, n_configs: int) -> GradCheckResult:
    tracker = _Tracker('total', END_TO_END_TOLERANCE)
    for index in range(n_configs):
        objective, params, batch = _tiny_problem(rng)
        tau_pl = float(rng.uniform(0.3, 0.7))
        frozen = objective.freeze(params, batch, tau_pl)
        analytic = objective.evaluate(params, batch, tau_pl, frozen=frozen).grads.flatten()

        def f(flat):
            return objective.loss_at(params, flat, batch, tau_pl, frozen)

        tracker.add(index, analytic, central_difference(f, params.flatten(), END_TO_END_STEP))
    return tracker.result()


CHECKS = (
    ('con', check_contrastive),
    ('ils', check_instance_similarity),
    ('ida', check_intra_domain),
    ('cls', check_classification),
    ('total', check_end_to_end),
)


def run_gradcheck(seed: int = 0, n_configs: int = 20,
                  only: Optional[List[str]] = None) -> List[GradCheckResult]:
    results = []
    for name, check in CHECKS:
        if only and name not in only:
            continue
        rng = np.random.default_rng([seed, len(results)])
        result = check(rng, n_configs)
        log = logger.info if result.passed else logger.error
        log(result.line(), extra={'extra_data': {'loss': name, 'max_rel_error': result.max_rel_error,
                                                 'passed': result.passed}})
        results.append(result)
    return results
