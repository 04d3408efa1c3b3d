"""Node refinement: hallucination-enhanced self-attention and the contrastive
node-completion loss over pooled implicit embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .nodes import NodeSet, concat_nodes
from .numerics import DegenerateInputError, ShapeError, Tensor
from .synthdata import MLPParams

__all__ = [
    "AttentionParams", "ImplicitTriple", "NodeSet", "attention_weights", "self_attention",
    "enhance_with_hallucinations", "reconstruct_nodes", "implicit_project", "cnc_loss",
]


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, scale: float = 1.0) -> "AttentionParams":
        std = scale / math.sqrt(dim)
        return cls(*(Tensor(rng.normal(0, std, (dim, dim)), requires_grad=True) for _ in range(3)))

    @classmethod
    def identity(cls, dim: int) -> "AttentionParams":
        return cls(*(Tensor(np.eye(dim), requires_grad=True) for _ in range(3)))

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv]


def attention_weights(x: Tensor, attn: AttentionParams) -> Tensor:
    if x.shape[1] != attn.dim:
        raise ShapeError(f"attention width {attn.dim} does not match embeddings {x.shape}")
    q = nx.matmul(x, attn.wq)
    k = nx.matmul(x, attn.wk)
    scores = nx.matmul(q, nx.transpose(k)) * (1.0 / math.sqrt(attn.dim))
    return nx.softmax(scores, axis=1)


def self_attention(x: Tensor, attn: AttentionParams) -> Tensor:
    """Single-head scaled dot-product attention, without the residual."""
    return nx.matmul(attention_weights(x, attn), nx.matmul(x, attn.wv))


def enhance_with_hallucinations(raw: NodeSet, delta_miss: NodeSet) -> NodeSet:
    if len(delta_miss) == 0:
        return raw
    return concat_nodes(raw, delta_miss, raw.domain_tag)


def reconstruct_nodes(v_star: NodeSet, attn: AttentionParams) -> NodeSet:
    """Attend over raw and hallucinated nodes; keep only the raw rows."""
    x = v_star.embeddings
    out = self_attention(x, attn) + x
    keep = np.flatnonzero(~v_star.hallucinated)
    if len(keep) < len(v_star):
        out = nx.take_rows(out, keep)
    true = None if v_star.true_labels is None else v_star.true_labels[keep]
    return NodeSet(out, v_star.labels[keep], v_star.domain_tag, v_star.hallucinated[keep],
                   v_star.weights[keep], true)


@dataclass
class ImplicitTriple:
    e_ini: Tensor
    e_neg: Tensor
    e_pos: Tensor


def _pool(nodes: NodeSet) -> Tensor:
    if len(nodes) == 0:
        raise DegenerateInputError("cannot pool an empty node set")
    return nx.mean(nodes.embeddings, axis=0, keepdims=True)


def implicit_project(v_raw: NodeSet, v: NodeSet, v_star: NodeSet, proj: MLPParams,
                     stop_positive: bool) -> ImplicitTriple:
    """Mean-pool each node set and map it through the shared projection head.

    ``stop_positive`` wraps the positive embedding in a stop-gradient (used for
    the source domain).
    """
    e_ini, e_neg, e_pos = (nx.reshape(proj(_pool(n)), (-1,)) for n in (v_raw, v, v_star))
    if stop_positive:
        e_pos = nx.stop_gradient(e_pos)
    return ImplicitTriple(e_ini, e_neg, e_pos)


def cnc_loss(triple_s: ImplicitTriple, triple_t: ImplicitTriple, temperature: float = 0.06) -> Tensor:
    """Contrastive node-completion loss.

    The numerator rewards agreement between each domain's initial and positive
    embeddings; the denominator sums over all ordered pairs of
    (source positive, target initial, source negative, target negative).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    f = nx.cosine_similarity
    inv_t = 1.0 / temperature
    log_num = (f(triple_s.e_ini, triple_s.e_pos) + f(triple_t.e_ini, triple_t.e_pos)) * inv_t
    z = [triple_s.e_pos, triple_t.e_ini, triple_s.e_neg, triple_t.e_neg]
    sims = [f(z[i], z[k]) * inv_t for i in range(4) for k in range(4) if k != i]
    # log-sum-exp with a constant shift; the shift cancels exactly in the gradient
    shift = max(s.item() for s in sims)
    terms = [nx.exp(s - shift) for s in sims]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return nx.log(total) + shift - log_num
