"""
Cosine nearest-neighbour retrieval over a labeled gallery.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from src.core.exceptions import InvalidK
from src.numerics import core_math

logger = logging.getLogger(__name__)


def nearest_neighbors(query: np.ndarray, gallery_embeddings: np.ndarray,
                      gallery_ids: Sequence[int], k: int) -> List[Tuple[int, float]]:
    """Top-k (id, cosine) pairs, highest similarity first, ties to the lowest id"""
    gallery_embeddings = np.atleast_2d(np.asarray(gallery_embeddings, dtype=np.float64))
    gallery_ids = np.asarray(gallery_ids, dtype=np.int64)
    n = gallery_embeddings.shape[0]
    if n == 0:
        raise InvalidK("gallery is empty")
    if not 1 <= k <= n:
        raise InvalidK(f"k must be in [1, {n}], got {k}")

    sims = core_math.cosine_similarity_matrix(np.atleast_2d(query), gallery_embeddings)[0]
    order = np.lexsort((gallery_ids, -sims))[:k]
    return [(int(gallery_ids[i]), float(sims[i])) for i in order]


@dataclass
class RetrievalResult:
    query_id: int
    query_label: int
    neighbors: List[Tuple[int, float]]
    neighbor_labels: List[int]

    @property
    def agreement(self) -> float:
        if not self.neighbor_labels:
            return 0.0
        return sum(label == self.query_label for label in self.neighbor_labels) / len(self.neighbor_labels)


def retrieve_batch(query_embeddings: np.ndarray, query_ids: Sequence[int], query_labels: Sequence[int],
                   gallery_embeddings: np.ndarray, gallery_ids: Sequence[int],
                   gallery_labels: Sequence[int], k: int) -> List[RetrievalResult]:
    label_of = {int(i): int(y) for i, y in zip(gallery_ids, gallery_labels)}
    results = []
    for z, qid, qlabel in zip(query_embeddings, query_ids, query_labels):
        neighbors = nearest_neighbors(z, gallery_embeddings, gallery_ids, k)
        results.append(RetrievalResult(int(qid), int(qlabel), neighbors,
                                       [label_of[i] for i, _ in neighbors]))
    if results:
        mean_agreement = float(np.mean([r.agreement for r in results]))
        logger.info(f"Retrieved {k} neighbours for {len(results)} queries, label agreement {mean_agreement:.3f}")
    return results
