"""
The combined training objective for one iteration.

One forward pass runs over the stacked support inputs and every view of the
unlabeled batch. Each enabled loss part is pulled back separately into a
flat parameter gradient so the parts can be inspected on their own, then
the parts are combined with their weights.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from src.core.exceptions import NonFiniteLoss
from src.core.schemas import LOSS_NAMES, TrainConfig
from src.engine import model
from src.engine.model import ModelParams
from src.engine.pseudo_labels import SoftPseudoLabeler
from src.engine.sampling import SupportSample, UnlabeledBatch, ViewSet
from src.numerics import losses
from src.numerics.losses import LossValueWithGrad, LossWeights

logger = logging.getLogger(__name__)


@dataclass
class IterationBatch:
    support: SupportSample
    unlabeled: UnlabeledBatch
    views: ViewSet


@dataclass
class FrozenTerms:
    """Stop-gradient quantities pinned at a base point (used by gradient checks)"""
    ils_targets: Optional[np.ndarray] = None
    ida_mask: Optional[np.ndarray] = None


@dataclass
class ObjectiveResult:
    value: float
    parts: Dict[str, float]
    grads: ModelParams
    grad_norms: Dict[str, float] = field(default_factory=dict)
    global_pseudo: Optional[np.ndarray] = None  # (B, 2, C)
    ils_targets: Optional[np.ndarray] = None
    ida_mask: Optional[np.ndarray] = None


class SpiObjective:
    """lambda_con*L_con + lambda_ils*L_ils + lambda_ida*L_ida + lambda_cls*L_cls over the enabled parts"""

    def __init__(self, config: TrainConfig, n_classes: int):
        self.config = config
        self.n_classes = n_classes
        self.enabled = tuple(name for name in LOSS_NAMES if name in config.loss_mask)
        self.weights = LossWeights(config.lambda_con, config.lambda_ils,
                                   config.lambda_ida, config.lambda_cls)
        self.labeler = SoftPseudoLabeler(n_classes)

    def _needs_unlabeled(self) -> bool:
        return 'ils' in self.enabled or 'ida' in self.enabled

    def evaluate(self, params: ModelParams, batch: IterationBatch, tau_pl: float,
                 frozen: Optional[FrozenTerms] = None,
                 with_pseudo_labels: bool = True) -> ObjectiveResult:
        cfg = self.config
        support = batch.support
        n_sup = len(support)
        G, L = batch.views.global_views, batch.views.local_views
        n_global, B, d_in = G.shape
        n_local = L.shape[0]

        use_views = self._needs_unlabeled() or with_pseudo_labels
        if use_views:
            X_all = np.concatenate([support.X, G.reshape(-1, d_in), L.reshape(-1, d_in)])
        else:
            X_all = support.X
        Z_all, cache = model.forward_features(params, X_all, return_cache=True)
        if not np.all(np.isfinite(Z_all)):
            raise NonFiniteLoss("embeddings are not finite")
        Z_sup = Z_all[:n_sup]

        zero = np.zeros_like(Z_all)
        part_grads: Dict[str, LossValueWithGrad] = {}
        grad_norms: Dict[str, float] = {}
        result = ObjectiveResult(value=0.0, parts={}, grads=params.zeros_like())

        # Soft pseudo-labels for every view, against the support embeddings
        view_caches = []
        if use_views:
            Z_views = Z_all[n_sup:].reshape(n_global + n_local, B, -1)
            pseudo = np.empty((B, n_global + n_local, self.n_classes))
            for v in range(n_global + n_local):
                pseudo[:, v], view_cache = self.labeler.forward(Z_views[v], Z_sup, support.labels, tau_pl)
                view_caches.append(view_cache)
            result.global_pseudo = pseudo[:, :n_global].copy()

        def pull_back(name: str, value: float, dZ: np.ndarray, classifier_grad=None):
            mlp_grads = model.backward_features(params, cache, dZ)
            if classifier_grad is None:
                W, b = params.classifier
                classifier_grad = (np.zeros_like(W), np.zeros_like(b))
            flat = ModelParams(mlp_layers=mlp_grads, classifier=classifier_grad).flatten()
            part_grads[name] = LossValueWithGrad(value, flat)
            grad_norms[name] = float(np.linalg.norm(flat))

        if 'con' in self.enabled:
            con = losses.supervised_contrastive(Z_sup, support.labels, cfg.tau_con,
                                                normalize=cfg.normalize_contrastive,
                                                anchor_mode=cfg.anchor_mode)
            dZ = zero.copy()
            dZ[:n_sup] = con.grad
            pull_back('con', con.value, dZ)

        if 'ils' in self.enabled:
            targets = frozen.ils_targets if frozen and frozen.ils_targets is not None else None
            if targets is None:
                targets = losses.instance_similarity_targets(pseudo[:, :n_global], n_local, cfg.tau_sharp)
            ils = losses.instance_similarity_loss(pseudo[:, :n_global], pseudo[:, n_global:],
                                                  cfg.tau_sharp, targets=targets)
            result.ils_targets = targets
            dZ = zero.copy()
            for v, view_cache in enumerate(view_caches):
                dZ_view, dZ_support = self.labeler.backward(view_cache, ils.grad[:, v])
                start = n_sup + v * B
                dZ[start:start + B] += dZ_view
                dZ[:n_sup] += dZ_support
            pull_back('ils', ils.value, dZ)

        if 'ida' in self.enabled:
            Z_first = Z_all[n_sup:n_sup + B]
            mask = frozen.ida_mask if frozen and frozen.ida_mask is not None else None
            if mask is None:
                mask = losses.build_similarity_mask(Z_first, cfg.top_k)
            ida = losses.intra_domain_alignment(Z_first, mask)
            result.ida_mask = mask
            dZ = zero.copy()
            dZ[n_sup:n_sup + B] = ida.grad
            pull_back('ida', ida.value, dZ)

        if 'cls' in self.enabled:
            logits = model.forward_classifier(params, Z_sup)
            cls = losses.classification_loss(logits, support.labels, cfg.label_smoothing, self.n_classes)
            classifier_grad, dZ_sup = model.backward_classifier(params, Z_sup, cls.grad)
            dZ = zero.copy()
            dZ[:n_sup] = dZ_sup
            pull_back('cls', cls.value, dZ, classifier_grad)

        combined = losses.total_loss(part_grads, self.weights)
        result.value = combined.value
        result.parts = {name: part.value for name, part in part_grads.items()}
        result.grads = params.unflatten(combined.grad)
        result.grad_norms = grad_norms
        return result

    def freeze(self, params: ModelParams, batch: IterationBatch, tau_pl: float) -> FrozenTerms:
        base = self.evaluate(params, batch, tau_pl)
        return FrozenTerms(ils_targets=base.ils_targets, ida_mask=base.ida_mask)

    def loss_at(self, params: ModelParams, flat: np.ndarray, batch: IterationBatch,
                tau_pl: float, frozen: FrozenTerms) -> float:
        return self.evaluate(params.unflatten(flat), batch, tau_pl, frozen=frozen,
                             with_pseudo_labels=False).value
