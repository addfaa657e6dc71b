"""
The four training losses and their weighted combination.

Each loss returns a LossValueWithGrad whose `grad` has the shape of the
argument it differentiates. Losses are sums over the batch, not means.
"""

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from src.core.exceptions import (
    DegenerateBatch, InvalidClass, InvalidViewCount, NonFiniteLoss, ShapeMismatch
)
from src.numerics import core_math
from src.numerics.core_math import _check_tau


@dataclass
class LossValueWithGrad:
    value: float
    grad: np.ndarray


@dataclass
class LossWeights:
    lambda_con: float = 4.0
    lambda_ils: float = 1.0
    lambda_ida: float = 1.0
    lambda_cls: float = 1.0

    def as_dict(self) -> Dict[str, float]:
        return {'con': self.lambda_con, 'ils': self.lambda_ils,
                'ida': self.lambda_ida, 'cls': self.lambda_cls}


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    peak = np.max(x, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    return np.squeeze(peak, axis=axis) + np.log(np.sum(np.exp(x - peak), axis=axis))


def _positive_weights(labels: np.ndarray) -> np.ndarray:
    """W[i, p] = 1/|P_i| for p sharing i's label, p != i"""
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    counts = same.sum(axis=1)
    if np.any(counts == 0):
        anchor = int(np.flatnonzero(counts == 0)[0])
        raise DegenerateBatch(f"anchor {anchor} (class {labels[anchor]}) has no positive")
    return same / counts[:, None]


def supervised_contrastive(embeddings: np.ndarray, labels: Sequence[int], tau: float,
                           normalize: bool = True, anchor_mode: str = 'as_written') -> LossValueWithGrad:
    """Supervised contrastive loss summed over anchors.

    as_written: log exp(z_i.z_p/t) / sum_{a != i} exp(z_a.z_p/t)
    standard:   log exp(z_i.z_p/t) / sum_{a != i} exp(z_i.z_a/t)
    """
    _check_tau(tau)
    Z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = Z.shape[0]
    if n < 2:
        raise DegenerateBatch("contrastive loss needs at least two samples")
    if labels.shape[0] != n:
        raise ShapeMismatch(f"{n} embeddings but {labels.shape[0]} labels")

    U = core_math.l2_normalize(Z) if normalize else Z
    S = U @ U.T / tau
    W = _positive_weights(labels)

    if anchor_mode == 'as_written':
        # T[i, a, p] = S[a, p] with a == i excluded
        T = np.broadcast_to(S[None, :, :], (n, n, n)).copy()
        idx = np.arange(n)
        T[idx, idx, :] = -np.inf
        log_den = _logsumexp(T, axis=1)  # [i, p]
        value = float(np.sum(W * (log_den - S)))
        Q = np.exp(T - log_den[:, None, :])  # softmax over a
        dS = -W + np.einsum('ip,iap->ap', W, Q)
    elif anchor_mode == 'standard':
        masked = S.copy()
        np.fill_diagonal(masked, -np.inf)
        log_den = _logsumexp(masked, axis=1)  # [i]
        value = float(np.sum(W * (log_den[:, None] - S)))
        Q = np.exp(masked - log_den[:, None])
        dS = -W + Q * W.sum(axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown anchor_mode: {anchor_mode}")

    dU = (dS + dS.T) @ U / tau
    grad = core_math.l2_normalize_backward(Z, dU) if normalize else dU
    return LossValueWithGrad(value, grad)


def _check_views(global_pseudo: np.ndarray, local_pseudo: np.ndarray):
    G = np.asarray(global_pseudo, dtype=np.float64)
    L = np.asarray(local_pseudo, dtype=np.float64)
    if G.ndim != 3 or G.shape[1] != 2:
        raise InvalidViewCount(f"exactly 2 global views required, got shape {G.shape}")
    if L.size == 0:
        L = np.zeros((G.shape[0], 0, G.shape[2]))
    if L.ndim != 3 or L.shape[0] != G.shape[0] or L.shape[2] != G.shape[2]:
        raise ShapeMismatch(f"local views {L.shape} do not match global views {G.shape}")
    return G, L


def instance_similarity_targets(global_pseudo: np.ndarray, n_local: int,
                                tau_sharp: float) -> np.ndarray:
    """Sharpened targets, shaped (B, 2 + n_local, C): g2 for g1, g1 for g2, their mean for locals"""
    _check_tau(tau_sharp)
    G = np.asarray(global_pseudo, dtype=np.float64)
    if G.ndim != 3 or G.shape[1] != 2:
        raise InvalidViewCount(f"exactly 2 global views required, got shape {G.shape}")
    sharp = core_math.sharpen(G, tau_sharp)
    target_g1, target_g2 = sharp[:, 0], sharp[:, 1]
    target_mean = 0.5 * (target_g1 + target_g2)
    return np.concatenate([
        target_g2[:, None, :],
        target_g1[:, None, :],
        np.repeat(target_mean[:, None, :], n_local, axis=1),
    ], axis=1)


def instance_similarity_loss(global_pseudo: np.ndarray, local_pseudo: np.ndarray,
                             tau_sharp: float, targets: Optional[np.ndarray] = None) -> LossValueWithGrad:
    """Cross-view pseudo-label consistency.

    global_pseudo: (B, 2, C); local_pseudo: (B, n_local, C). The sharpened
    targets are constants; `grad` is w.r.t. the pseudo-labels, shaped
    (B, 2 + n_local, C) with the global views first. Passing `targets`
    pins them instead of deriving them from `global_pseudo`.
    """
    _check_tau(tau_sharp)
    G, L = _check_views(global_pseudo, local_pseudo)
    predictions = np.concatenate([G, L], axis=1)
    if targets is None:
        targets = instance_similarity_targets(G, L.shape[1], tau_sharp)

    value = float(np.sum(core_math.cross_entropy(predictions, targets)))
    grad = core_math.cross_entropy_grad(predictions, targets)
    return LossValueWithGrad(value, grad)


def build_similarity_mask(Z: np.ndarray, k: int) -> np.ndarray:
    """M[i, j] = 1 iff the top-k index sets of z_i and z_j coincide"""
    rows = core_math.topk_rows(Z, k)
    return np.all(rows[:, None, :] == rows[None, :, :], axis=2).astype(np.uint8)


def intra_domain_alignment(Z: np.ndarray, M: np.ndarray) -> LossValueWithGrad:
    """(1/B^2) sum_ij M_ij |z_i - z_j|, subgradient 0 at coincident points"""
    Z = np.asarray(Z, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    n = Z.shape[0]
    if M.shape != (n, n):
        raise ShapeMismatch(f"mask {M.shape} does not match {n} embeddings")

    diff = Z[:, None, :] - Z[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    value = float(np.sum(M * dist)) / (n * n)

    safe = np.where(dist > 0, dist, 1.0)
    unit = np.where((dist > 0)[:, :, None], diff / safe[:, :, None], 0.0)
    grad = np.einsum('ij,ijd->id', M + M.T, unit) / (n * n)
    return LossValueWithGrad(value, grad)


def classification_loss(logits: np.ndarray, labels: Sequence[int], alpha: float,
                        n_classes: int) -> LossValueWithGrad:
    """Label-smoothed cross-entropy summed over rows; grad w.r.t. logits"""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[0] != labels.shape[0]:
        raise ShapeMismatch(f"{logits.shape[0]} logit rows but {labels.shape[0]} labels")
    if logits.shape[1] != n_classes:
        raise InvalidClass(f"logits have {logits.shape[1]} columns, expected {n_classes}")

    targets = core_math.smooth_labels(labels, alpha, n_classes)
    log_probs = core_math.log_softmax(logits)
    value = float(-np.sum(targets * log_probs))
    grad = np.exp(log_probs) - targets
    return LossValueWithGrad(value, grad)


def total_loss(parts: Mapping[str, LossValueWithGrad], weights: LossWeights) -> LossValueWithGrad:
    """Weighted sum of the parts; grads must share a shape"""
    lambdas = weights.as_dict()
    bad = {name: part.value for name, part in parts.items()
           if not np.isfinite(part.value) or not np.all(np.isfinite(part.grad))}
    if bad:
        raise NonFiniteLoss(f"non-finite loss parts: {', '.join(sorted(bad))}",
                            parts={name: float(part.value) for name, part in parts.items()})

    value = 0.0
    grad = None
    for name in ('con', 'ils', 'ida', 'cls'):
        if name not in parts:
            continue
        part = parts[name]
        value += lambdas[name] * part.value
        scaled = lambdas[name] * np.asarray(part.grad, dtype=np.float64)
        grad = scaled if grad is None else grad + scaled
    if grad is None:
        grad = np.zeros(0)
    return LossValueWithGrad(value, grad)
