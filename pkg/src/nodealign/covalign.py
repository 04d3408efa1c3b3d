"""Covariance-based style disentanglement for graph nodes.

Per-graph covariances of source and target embeddings are collected during a
warm-up phase. The per-element spread between the two domains, averaged over
graphs, marks covariance entries that move with the domain. A 1-D k-means on
the strict upper triangle of that variance matrix picks the high-variance
entries, and the alignment loss suppresses them.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .nodes import NodeSet
from .numerics import DegenerateInputError, Tensor
from .refine import AttentionParams, self_attention

log = logging.getLogger(__name__)


class StatsStateError(RuntimeError):
    pass


def shared_attention(nodes: NodeSet, attn: AttentionParams) -> NodeSet:
    """Self-attention plus residual; the same ``attn`` is applied to both domains."""
    x = nodes.embeddings
    return nodes.with_embeddings(self_attention(x, attn) + x)


def covariance(x: Tensor) -> Tensor:
    m = x.shape[0]
    if m < 2:
        raise DegenerateInputError(f"covariance needs at least 2 rows, got {m}")
    # shifting by a constant row first leaves the covariance unchanged but makes
    # constant columns centre to exact zeros
    x = x - nx.stop_gradient(nx.take_rows(x, [0]))
    xc = x - nx.mean(x, axis=0, keepdims=True)
    gram = nx.matmul(nx.transpose(xc), xc)
    # averaging with the transpose makes the result exactly symmetric
    return (gram + nx.transpose(gram)) * (0.5 / (m - 1))


@dataclass
class CovarianceStats:
    dim: int
    count: int = 0
    mean: np.ndarray = None
    m2: np.ndarray = None
    var_mean: np.ndarray = None
    xi: np.ndarray | None = None

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros((self.dim, self.dim))
            self.m2 = np.zeros((self.dim, self.dim))
            self.var_mean = np.zeros((self.dim, self.dim))

    @property
    def finalized(self) -> bool:
        return self.xi is not None

    @property
    def samples(self) -> int:
        return 2 * self.count

    def pooled_variance(self) -> np.ndarray:
        """Population variance over every covariance sample seen so far."""
        return self.m2 / max(self.samples, 1)


def stats_accumulate(stats: CovarianceStats, emb_s, emb_t) -> CovarianceStats:
    """Add one graph: its source and target covariances form a two-sample pair."""
    if stats.finalized:
        raise StatsStateError("covariance statistics are already finalized")
    cs = covariance(Tensor(emb_s.data if isinstance(emb_s, Tensor) else emb_s)).data
    ct = covariance(Tensor(emb_t.data if isinstance(emb_t, Tensor) else emb_t)).data
    mean, m2 = stats.mean.copy(), stats.m2.copy()
    n = stats.samples
    for sample in (cs, ct):
        n += 1
        delta = sample - mean
        mean += delta / n
        m2 += delta * (sample - mean)
    # per-graph population variance of the pair {cs, ct}
    d = cs - ct
    sigma2 = 0.25 * d * d
    count = stats.count + 1
    var_mean = stats.var_mean + (sigma2 - stats.var_mean) / count
    return CovarianceStats(stats.dim, count, mean, np.maximum(m2, 0.0), var_mean)


def stats_finalize(stats: CovarianceStats) -> np.ndarray:
    """Freeze the statistics and return the variance matrix."""
    if stats.count == 0:
        raise StatsStateError("no graphs were accumulated")
    if not stats.finalized:
        stats.xi = stats.var_mean.copy()
    return stats.xi


# k-means -------------------------------------------------------------------

def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min((x[:, None] - np.asarray(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total == 0:
            centers.append(x[rng.integers(len(x))])
        else:
            centers.append(x[rng.choice(len(x), p=d2 / total)])
    return np.asarray(centers, dtype=np.float64)


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int):
    assign = None
    for _ in range(max_iter):
        new = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(len(centers)):
            members = x[assign == j]
            if len(members):
                centers[j] = members.mean()
    wcss = float(sum(((x[assign == j] - centers[j]) ** 2).sum() for j in range(len(centers))))
    return centers, assign, wcss


def kmeans_1d(values, k: int, seed=0, n_init: int = 10, max_iter: int = 100):
    """Scalar k-means with k-means++ seeding; best of ``n_init`` restarts.

    Returns ``(centers, assignment, wcss)`` with clusters relabelled so that
    centers ascend.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if not 1 <= k <= len(x):
        raise ValueError(f"k={k} invalid for {len(x)} points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers, assign, wcss = _lloyd(x, _kmeanspp(x, k, rng), max_iter)
        if best is None or wcss < best[2] - 1e-15:
            best = (centers.copy(), assign.copy(), wcss)
    centers, assign, wcss = best
    order = np.argsort(centers, kind="stable")
    relabel = np.empty(k, dtype=np.int64)
    relabel[order] = np.arange(k)
    return centers[order], relabel[assign], wcss


@dataclass
class StyleMask:
    mask: np.ndarray
    clusters: list[tuple[float, list[tuple[int, int]]]] = field(default_factory=list)
    k: int = 4
    m: int = 1

    @property
    def density(self) -> float:
        d = self.mask.shape[0]
        pairs = d * (d - 1) // 2
        return float(self.mask.sum() / pairs) if pairs else 0.0


def build_mask(xi: np.ndarray, k: int = 4, m: int = 1, seed=0) -> StyleMask:
    """Cluster the strict upper triangle of ``xi``; mask clusters m+1..k (1-based, ascending)."""
    if not 1 <= m < k:
        raise ValueError(f"need 1 <= m < k, got m={m}, k={k}")
    d = xi.shape[0]
    rows, cols = np.triu_indices(d, k=1)
    values = xi[rows, cols]
    distinct = len(np.unique(values))
    if distinct < k:
        log.warning("only %d distinct variance values; clamping k=%d to %d", distinct, k, distinct)
        k = distinct
    mask = np.zeros((d, d))
    if k == 0:
        return StyleMask(mask, [], k, m)
    centers, assign, _ = kmeans_1d(values, k, seed=seed)
    clusters = []
    for j in range(k):
        idx = np.flatnonzero(assign == j)
        members = [(int(rows[i]), int(cols[i])) for i in idx]
        clusters.append((float(centers[j]), members))
        if j >= m:
            mask[rows[idx], cols[idx]] = 1.0
    if m >= k:
        log.warning("m=%d leaves no high-variance cluster after clamping; mask is empty", m)
    return StyleMask(mask, clusters, k, m)


def na_loss(emb_s: Tensor, emb_t: Tensor, mask: StyleMask) -> Tensor:
    """Mean over the two domains of the L1 norm of the masked covariance.

    The norm is divided by the number of selected entries so the loss scale
    does not grow with the embedding width. An empty mask gives 0.
    """
    selected = float(mask.mask.sum())
    if selected == 0:
        return Tensor(0.0)
    a = Tensor(mask.mask / selected)
    terms = [nx.sum_(nx.abs_(covariance(e) * a)) for e in (emb_s, emb_t)]
    return (terms[0] + terms[1]) * 0.5


def write_matrix_csv(matrix: np.ndarray, path) -> None:
    """Write ``matrix`` as (row, col, value) records."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "value"])
        for i in range(matrix.shape[0]):
            for j in range(matrix.shape[1]):
                w.writerow([i, j, repr(float(matrix[i, j]))])
