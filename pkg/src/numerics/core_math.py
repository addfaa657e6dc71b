"""
Shared numerics: temperature softmax, sharpening, normalization,
cross-entropy, cosine similarity, top-k and label smoothing.

Every function accepts a single vector or a batch of row vectors and is a
pure function of its inputs.
"""

from typing import FrozenSet, Sequence

import numpy as np

from src.core.exceptions import (
    DegenerateEmbedding, InvalidClass, InvalidInput, InvalidK, InvalidTemperature, ShapeMismatch
)

EPS_NORM = 1e-12
EPS_LOG = 1e-12


def _check_tau(tau: float):
    if not tau > 0:
        raise InvalidTemperature(f"temperature must be > 0, got {tau}")


def softmax_tau(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """exp(logits / tau) normalized along the last axis (max-subtracted)"""
    _check_tau(tau)
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0 or x.shape[-1] == 0:
        raise InvalidInput("logits must be non-empty")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("logits must be finite")

    scaled = x / tau
    scaled = scaled - np.max(scaled, axis=-1, keepdims=True)
    exps = np.exp(scaled)
    return exps / np.sum(exps, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def l2_normalize(z: np.ndarray) -> np.ndarray:
    """Scale every row to unit Euclidean norm"""
    z = np.asarray(z, dtype=np.float64)
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    if not np.all(np.isfinite(norms)):
        raise DegenerateEmbedding("embedding has a non-finite norm")
    if np.any(norms <= EPS_NORM):
        raise DegenerateEmbedding(f"embedding norm at or below {EPS_NORM}")
    return z / norms


def l2_normalize_backward(z: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. z/|z| back to z"""
    z = np.asarray(z, dtype=np.float64)
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    unit = z / norms
    radial = np.sum(unit * grad_unit, axis=-1, keepdims=True)
    return (grad_unit - unit * radial) / norms


def sharpen(p: np.ndarray, tau: float) -> np.ndarray:
    """p^(1/tau) renormalized; computed in log space so small entries do not underflow"""
    _check_tau(tau)
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide='ignore'):
        logp = np.log(p) / tau
    logp = logp - np.max(logp, axis=-1, keepdims=True)
    powered = np.exp(logp)
    return powered / np.sum(powered, axis=-1, keepdims=True)


def entropy(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -np.sum(p * np.log(np.maximum(p, EPS_LOG)), axis=-1)


def cross_entropy(prediction: np.ndarray, target: np.ndarray) -> np.ndarray:
    """-sum(target * log(prediction)) per row; prediction clamped at 1e-12"""
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise ShapeMismatch(f"prediction {prediction.shape} vs target {target.shape}")
    return -np.sum(target * np.log(np.maximum(prediction, EPS_LOG)), axis=-1)


def cross_entropy_grad(prediction: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Gradient of cross_entropy w.r.t. prediction; target is a constant"""
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise ShapeMismatch(f"prediction {prediction.shape} vs target {target.shape}")
    clamped = prediction <= EPS_LOG
    grad = -target / np.maximum(prediction, EPS_LOG)
    grad[clamped] = 0.0
    return grad


def cosine_similarity_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ShapeMismatch(f"embedding dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    return np.clip(l2_normalize(A) @ l2_normalize(B).T, -1.0, 1.0)


def topk_indices(z: np.ndarray, k: int) -> FrozenSet[int]:
    """Indices of the k largest entries; ties go to the lowest index"""
    z = np.asarray(z, dtype=np.float64)
    if not 1 <= k <= z.shape[-1]:
        raise InvalidK(f"k must be in [1, {z.shape[-1]}], got {k}")
    order = np.argsort(-z, kind='stable')
    return frozenset(int(i) for i in order[:k])


def topk_rows(Z: np.ndarray, k: int) -> np.ndarray:
    """Sorted top-k index rows for a batch, same tie rule as topk_indices"""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if not 1 <= k <= Z.shape[1]:
        raise InvalidK(f"k must be in [1, {Z.shape[1]}], got {k}")
    order = np.argsort(-Z, axis=1, kind='stable')[:, :k]
    return np.sort(order, axis=1)


def smooth_label(y: int, alpha: float, n_classes: int) -> np.ndarray:
    if not 0 <= y < n_classes:
        raise InvalidClass(f"class {y} out of range [0, {n_classes})")
    out = np.full(n_classes, alpha / n_classes)
    out[y] += 1.0 - alpha
    return out


def smooth_labels(labels: Sequence[int], alpha: float, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidClass(f"labels must be in [0, {n_classes})")
    out = np.full((labels.size, n_classes), alpha / n_classes)
    out[np.arange(labels.size), labels] += 1.0 - alpha
    return out


def one_hot(labels: Sequence[int], n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidClass(f"labels must be in [0, {n_classes})")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out
