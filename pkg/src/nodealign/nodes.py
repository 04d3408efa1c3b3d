from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ShapeError, Tensor, concat


@dataclass
class NodeSet:
    """Graph nodes: one embedding row per node plus per-node bookkeeping."""

    embeddings: Tensor
    labels: np.ndarray
    domain_tag: str
    hallucinated: np.ndarray = None
    weights: np.ndarray = None
    true_labels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        m = len(self.labels)
        if self.embeddings.data.ndim != 2 or self.embeddings.shape[0] != m:
            raise ShapeError(f"{m} labels for embeddings of shape {self.embeddings.shape}")
        if self.hallucinated is None:
            self.hallucinated = np.zeros(m, dtype=bool)
        if self.weights is None:
            self.weights = np.ones(m)
        self.hallucinated = np.asarray(self.hallucinated, dtype=bool)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(self.weights < 0) or np.any(self.weights > 1):
            raise ValueError("node weights must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def with_embeddings(self, embeddings: Tensor) -> "NodeSet":
        return NodeSet(embeddings, self.labels, self.domain_tag, self.hallucinated,
                       self.weights, self.true_labels)


def empty_nodes(dim: int, domain_tag: str) -> NodeSet:
    return NodeSet(Tensor(np.zeros((0, dim))), np.zeros(0, dtype=np.int64), domain_tag)


def concat_nodes(a: NodeSet, b: NodeSet, domain_tag: str | None = None) -> NodeSet:
    if a.dim != b.dim:
        raise ShapeError(f"embedding width mismatch: {a.dim} vs {b.dim}")
    true = None
    if a.true_labels is not None or b.true_labels is not None:
        true = np.concatenate([a.labels if a.true_labels is None else a.true_labels,
                               b.labels if b.true_labels is None else b.true_labels])
    return NodeSet(
        concat([a.embeddings, b.embeddings], axis=0),
        np.concatenate([a.labels, b.labels]),
        domain_tag or a.domain_tag,
        np.concatenate([a.hallucinated, b.hallucinated]),
        np.concatenate([a.weights, b.weights]),
        true,
    )
