"""Per-phase-slot TopK similarity graphs over learnable sensor embeddings.

One detected period is partitioned into `n_slots` equal phase bins; each
bin owns an independent N x d embedding matrix from which a directed
TopK cosine-similarity graph is built. Adjacency entry A[j, i] = 1 means
j is a selected in-neighbor of i; the diagonal stays zero because the
attention layer handles the self term explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class NodeEmbeddings:
    """One trainable N x d matrix per phase slot."""

    slots: list[np.ndarray]

    def __post_init__(self):
        if not self.slots:
            raise ValueError("need at least one embedding slot")
        shape = self.slots[0].shape
        for m in self.slots:
            if m.ndim != 2 or m.shape != shape:
                raise ValueError("all embedding slots must share one N x d shape")

    @property
    def n_slots(self) -> int:
        return len(self.slots)

    @property
    def n_sensors(self) -> int:
        return self.slots[0].shape[0]

    @property
    def dim(self) -> int:
        return self.slots[0].shape[1]


def init_embeddings(
    n_sensors: int, dim: int, n_slots: int, rng: np.random.Generator
) -> NodeEmbeddings:
    """Uniform init on [-1/sqrt(d), 1/sqrt(d)]; zero rows are re-drawn so
    cosine similarity stays defined."""
    bound = 1.0 / np.sqrt(dim)
    slots = []
    for _ in range(n_slots):
        m = rng.uniform(-bound, bound, (n_sensors, dim))
        while True:
            zero = np.linalg.norm(m, axis=1) == 0.0
            if not zero.any():
                break
            m[zero] = rng.uniform(-bound, bound, (int(zero.sum()), dim))
        slots.append(m)
    return NodeEmbeddings(slots)


def cosine_similarity(embedding: np.ndarray) -> np.ndarray:
    """Pairwise row-cosine matrix: symmetric, unit diagonal, values in [-1, 1]."""
    embedding = np.asarray(embedding, dtype=np.float64)
    norms = np.linalg.norm(embedding, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"embedding row {int(zero[0])} has zero norm")
    unit = embedding / norms[:, None]
    # einsum keeps each pair's dot product independent of row order,
    # so similarities are bit-stable under node permutation
    sim = np.einsum("id,jd->ij", unit, unit)
    sim = np.clip((sim + sim.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(sim, 1.0)
    return sim


def topk_adjacency(similarity: np.ndarray, k: int) -> np.ndarray:
    """Keep, per target column i, the k most similar source nodes j != i.

    Ties break toward the lower node index; the edge set at budget k is a
    prefix of the edge set at budget k + 1.
    """
    similarity = np.asarray(similarity)
    n = similarity.shape[0]
    if similarity.shape != (n, n):
        raise ValueError("similarity matrix must be square")
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    adjacency = np.zeros((n, n))
    for i in range(n):
        col = similarity[:, i].copy()
        col[i] = -np.inf
        order = np.argsort(-col, kind="stable")
        adjacency[order[:k], i] = 1.0
    return adjacency


def build_slot_graphs(embeddings: NodeEmbeddings, k: int) -> list[np.ndarray]:
    """One TopK adjacency per phase slot, from that slot's embeddings."""
    return [topk_adjacency(cosine_similarity(m), k) for m in embeddings.slots]


def assign_slot(window_start: int, period: int, window: int, n_slots: int) -> int:
    """Phase bin of a window, from its start index alone.

    `window` is part of the call contract for alternative slotting
    strategies but the start phase decides the bin.
    """
    del window
    if period < 1 or n_slots < 1:
        raise ValueError("period and n_slots must be positive")
    return ((window_start % period) * n_slots) // period
