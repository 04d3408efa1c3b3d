"""Cross-domain message passing, OOD node down-weighting and the node loss."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .nodes import NodeSet, concat_nodes
from .numerics import DegenerateInputError, ShapeError, Tensor
from .refine import AttentionParams, self_attention


@dataclass
class GraphOptParams:
    attn: AttentionParams
    ln_gain: Tensor
    ln_bias: Tensor
    cls_w: Tensor
    cls_b: Tensor
    eps: float = 1e-5

    @classmethod
    def init(cls, dim: int, num_outputs: int, rng: np.random.Generator) -> "GraphOptParams":
        return cls(
            AttentionParams.init(dim, rng),
            Tensor(np.ones(dim), requires_grad=True),
            Tensor(np.zeros(dim), requires_grad=True),
            Tensor(rng.normal(0, 1 / np.sqrt(dim), (dim, num_outputs)), requires_grad=True),
            Tensor(np.zeros(num_outputs), requires_grad=True),
        )

    def parameters(self) -> list[Tensor]:
        return self.attn.parameters() + [self.ln_gain, self.ln_bias, self.cls_w, self.cls_b]


def message_pass(e_s: NodeSet, e_t: NodeSet, params: GraphOptParams,
                 attend: bool = True) -> NodeSet:
    """Joint graph over both domains: layer_norm(attention(E) + E).

    ``attend=False`` drops the attention term (ablation), leaving layer_norm(E).
    """
    if e_s.dim != e_t.dim:
        raise ShapeError(f"embedding width mismatch: {e_s.dim} vs {e_t.dim}")
    joint = concat_nodes(e_s, e_t, "joint")
    x = joint.embeddings
    h = self_attention(x, params.attn) + x if attend else x
    return joint.with_embeddings(nx.layer_norm(h, params.ln_gain, params.ln_bias, params.eps))


def classify(nodes: NodeSet, params: GraphOptParams) -> Tensor:
    return nx.matmul(nodes.embeddings, params.cls_w) + params.cls_b


def label_confidence(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return p[np.arange(len(labels)), labels]


def ood_downweight(nodes: NodeSet, logits, p: float = 0.03) -> NodeSet:
    """Zero the weight of the floor(p*M) nodes least confident in their own label.

    Ties are broken by ascending node index. Selection carries no gradient.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError("p must lie in [0, 1)")
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    conf = label_confidence(data, nodes.labels)
    n_drop = int(np.floor(p * len(nodes)))
    weights = np.ones(len(nodes))
    if n_drop:
        order = np.lexsort((np.arange(len(nodes)), conf))
        weights[order[:n_drop]] = 0.0
    return NodeSet(nodes.embeddings, nodes.labels, nodes.domain_tag, nodes.hallucinated,
                   weights, nodes.true_labels)


def node_loss(nodes: NodeSet, logits: Tensor) -> Tensor:
    """Weighted mean cross-entropy of each node's (pseudo-)label."""
    w = nodes.weights
    total = w.sum()
    if total <= 0:
        raise DegenerateInputError("all node weights are zero")
    logp = nx.log_softmax(logits, axis=1)
    picked = np.zeros_like(logp.data)
    picked[np.arange(len(nodes)), nodes.labels] = w / total
    return -nx.sum_(logp * Tensor(picked))


def write_ood_csv(nodes: NodeSet, logits: np.ndarray, domains, path, epoch: int) -> None:
    """Append one (epoch, node, domain, label, confidence, weight) row per node."""
    conf = label_confidence(logits, nodes.labels)
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["epoch", "node", "domain", "label", "confidence", "weight"])
        for i in range(len(nodes)):
            w.writerow([epoch, i, domains[i], int(nodes.labels[i]), f"{conf[i]:.6g}",
                        f"{nodes.weights[i]:g}"])
