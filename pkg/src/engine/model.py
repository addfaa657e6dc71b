"""
Feature extractor (ReLU MLP) and linear classifier with hand-written backprop.

Weights use the row-batch convention `x @ W + b`: an MLP layer mapping
n_in -> n_out stores W as (n_in, n_out), and the classifier weight is d x C.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.core.exceptions import ShapeMismatch, StorageError
from src.numerics import core_math

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'spi-checkpoint-v1'
Layer = Tuple[np.ndarray, np.ndarray]


@dataclass
class ModelParams:
    mlp_layers: List[Layer]
    classifier: Layer

    @property
    def d_in(self) -> int:
        return int(self.mlp_layers[0][0].shape[0])

    @property
    def embedding_dim(self) -> int:
        return int(self.mlp_layers[-1][0].shape[1])

    @property
    def n_classes(self) -> int:
        return int(self.classifier[0].shape[1])

    @property
    def hidden(self) -> List[int]:
        return [int(W.shape[1]) for W, _ in self.mlp_layers[:-1]]

    def arrays(self) -> List[np.ndarray]:
        """Parameters in declaration order: W1, b1, ..., classifier W, classifier b"""
        out = []
        for W, b in self.mlp_layers:
            out.extend([W, b])
        out.extend(self.classifier)
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> 'ModelParams':
        pairs = [(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)]
        return cls(mlp_layers=pairs[:-1], classifier=pairs[-1])

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, flat: np.ndarray) -> 'ModelParams':
        """Same shapes as self, values taken from a flat vector"""
        arrays, offset = [], 0
        for a in self.arrays():
            arrays.append(np.array(flat[offset:offset + a.size], dtype=np.float64).reshape(a.shape))
            offset += a.size
        if offset != flat.size:
            raise ShapeMismatch(f"flat vector has {flat.size} entries, expected {offset}")
        return self.from_arrays(arrays)

    def zeros_like(self) -> 'ModelParams':
        return self.from_arrays([np.zeros_like(a) for a in self.arrays()])

    def copy(self) -> 'ModelParams':
        return self.from_arrays([a.copy() for a in self.arrays()])


@dataclass
class FeatureCache:
    inputs: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)


def init_params(d_in: int, hidden: Sequence[int], embedding_dim: int, n_classes: int,
                rng: np.random.Generator) -> ModelParams:
    """He-scaled Gaussian weights, zero biases"""
    dims = [d_in, *hidden, embedding_dim]
    layers = []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        W = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
        layers.append((W, np.zeros(n_out)))
    W = rng.standard_normal((embedding_dim, n_classes)) * np.sqrt(2.0 / embedding_dim)
    return ModelParams(mlp_layers=layers, classifier=(W, np.zeros(n_classes)))


def forward_features(params: ModelParams, X: np.ndarray,
                     return_cache: bool = False):
    """Embeddings for a batch of rows; ReLU on every layer except the last"""
    h = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if h.shape[1] != params.d_in:
        raise ShapeMismatch(f"input dimension {h.shape[1]}, model expects {params.d_in}")

    cache = FeatureCache()
    last = len(params.mlp_layers) - 1
    for position, (W, b) in enumerate(params.mlp_layers):
        cache.inputs.append(h)
        pre = h @ W + b
        cache.pre_activations.append(pre)
        h = pre if position == last else np.maximum(pre, 0.0)
    return (h, cache) if return_cache else h


def backward_features(params: ModelParams, cache: FeatureCache,
                      grad_embeddings: np.ndarray) -> List[Layer]:
    """(dW, db) for every MLP layer given dLoss/dEmbedding"""
    grads: List[Layer] = []
    delta = np.asarray(grad_embeddings, dtype=np.float64)
    last = len(params.mlp_layers) - 1
    for position in range(last, -1, -1):
        W, _ = params.mlp_layers[position]
        if position != last:
            delta = delta * (cache.pre_activations[position] > 0)
        grads.append((cache.inputs[position].T @ delta, delta.sum(axis=0)))
        delta = delta @ W.T
    grads.reverse()
    return grads


def forward_classifier(params: ModelParams, Z: np.ndarray) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    W, b = params.classifier
    if Z.shape[1] != W.shape[0]:
        raise ShapeMismatch(f"embedding dimension {Z.shape[1]}, classifier expects {W.shape[0]}")
    return Z @ W + b


def class_probabilities(params: ModelParams, Z: np.ndarray) -> np.ndarray:
    return core_math.softmax_tau(forward_classifier(params, Z), 1.0)


def backward_classifier(params: ModelParams, Z: np.ndarray,
                        grad_logits: np.ndarray) -> Tuple[Layer, np.ndarray]:
    """((dW, db), dLoss/dZ)"""
    W, _ = params.classifier
    return (Z.T @ grad_logits, grad_logits.sum(axis=0)), grad_logits @ W.T


def predict(params: ModelParams, X: np.ndarray) -> np.ndarray:
    return np.argmax(forward_classifier(params, forward_features(params, X)), axis=1)


def save_checkpoint(params: ModelParams, path, seed: int, epoch: int) -> Path:
    """JSON header line, then little-endian float64 arrays in declaration order"""
    path = Path(path)
    header = {
        'format': CHECKPOINT_FORMAT,
        'd_in': params.d_in,
        'hidden': params.hidden,
        'd': params.embedding_dim,
        'C': params.n_classes,
        'seed': int(seed),
        'epoch': int(epoch),
        'shapes': [list(a.shape) for a in params.arrays()],
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as f:
            f.write((json.dumps(header, sort_keys=True) + '\n').encode('utf-8'))
            for a in params.arrays():
                f.write(np.ascontiguousarray(a, dtype='<f8').tobytes())
    except OSError as e:
        raise StorageError(f"cannot write checkpoint {path}: {e}")
    logger.debug(f"Saved checkpoint to {path} (epoch {epoch})")
    return path


def load_checkpoint(path) -> Tuple[ModelParams, dict]:
    path = Path(path)
    try:
        with open(path, 'rb') as f:
            header_line = f.readline()
            payload = f.read()
    except OSError as e:
        raise StorageError(f"cannot read checkpoint {path}: {e}")

    try:
        header = json.loads(header_line.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise StorageError(f"checkpoint {path} has an unreadable header: {e}")
    if header.get('format') != CHECKPOINT_FORMAT:
        raise StorageError(f"checkpoint {path} has unknown format {header.get('format')!r}")

    arrays, offset = [], 0
    for shape in header['shapes']:
        count = int(np.prod(shape)) if shape else 1
        chunk = payload[offset:offset + 8 * count]
        if len(chunk) != 8 * count:
            raise StorageError(f"checkpoint {path} is truncated")
        arrays.append(np.frombuffer(chunk, dtype='<f8').astype(np.float64).reshape(shape))
        offset += 8 * count
    if offset != len(payload):
        raise StorageError(f"checkpoint {path} has {len(payload) - offset} trailing bytes")
    return ModelParams.from_arrays(arrays), header


def layer_dims(params: ModelParams) -> List[int]:
    return [params.d_in, *params.hidden, params.embedding_dim, params.n_classes]


def describe(params: Optional[ModelParams]) -> str:
    if params is None:
        return '<uninitialized>'
    return '->'.join(str(d) for d in layer_dims(params))
