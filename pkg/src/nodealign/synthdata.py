"""Synthetic two-domain feature maps and semantic node sampling.

A "world" (class means, channel style shift) is fixed by ``SynthConfig.seed``;
each call to :func:`generate_domain_pair` draws a fresh scene from it.
Source pixels inside a box are Gaussian around their class mean, everything
else is Gaussian around the background mean (the origin). Target pixels come
from the same process followed by a fixed channel-wise affine shift.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .nodes import NodeSet
from .numerics import ShapeError, Tensor, matmul, relu

log = logging.getLogger(__name__)

SOURCE = "source"
TARGET = "target"


class EmptyForegroundError(ValueError):
    pass


@dataclass
class SynthConfig:
    num_classes: int = 8
    channels: int = 16
    embed_dim: int = 32
    height: int = 16
    width: int = 16
    boxes_per_image: int = 6
    box_min: int = 2
    box_max: int = 5
    class_separation: float = 0.75
    noise_std: float = 0.25
    # scalar or one value per channel; see channel_style()
    style_scale: float | tuple[float, ...] = 1.5
    style_offset: float | tuple[float, ...] = 0.125
    style_spread: float = 0.0
    target_noise: float = 0.025
    label_noise: float = 0.1
    # pseudo scores from a source-fitted posterior (a source-trained detector)
    # rather than the Bayes posterior of the target domain
    source_pseudo_scores: bool = True
    tau: float = 0.6
    per_box: int = 4
    background: int | None = None
    target_nodes: int | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.channels < 4:
            raise ValueError("channels must be >= 4")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if self.box_min < 1 or self.box_max < self.box_min:
            raise ValueError("need 1 <= box_min <= box_max")
        if self.box_max > min(self.height, self.width):
            raise ValueError("box_max exceeds the feature map size")
        if self.class_separation == 0 and self.label_noise > 0:
            raise ValueError("class_separation 0 with label_noise > 0 is unlearnable")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError("label_noise must lie in [0, 1)")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.per_box < 1:
            raise ValueError("per_box must be >= 1")
        if self.background is not None and self.background < 0:
            raise ValueError("background must be >= 0")
        for name in ("style_scale", "style_offset"):
            v = getattr(self, name)
            if not np.isscalar(v) and len(v) != self.channels:
                raise ValueError(f"{name} needs 1 or {self.channels} values")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class GroundTruthBox:
    x0: int
    y0: int
    x1: int
    y1: int
    category: int

    def contains(self, row: int, col: int) -> bool:
        return self.y0 <= row < self.y1 and self.x0 <= col < self.x1

    def pixels(self) -> list[tuple[int, int]]:
        return [(r, c) for r in range(self.y0, self.y1) for c in range(self.x0, self.x1)]


@dataclass
class FeatureMap:
    values: np.ndarray  # H x W x D
    domain_tag: str

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass
class ScoreMap:
    values: np.ndarray  # H x W x C, entries in [0, 1]


@dataclass
class DomainPair:
    source: FeatureMap
    source_boxes: list[GroundTruthBox]
    target: FeatureMap
    target_scores: ScoreMap
    # hidden ground truth, only used for evaluation
    target_boxes: list[GroundTruthBox]


@dataclass
class RawNodeSet:
    embeddings: Tensor
    labels: np.ndarray
    domain_tag: str
    pixel_origins: np.ndarray  # M x 2 (row, col)
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class MLPParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator) -> "MLPParams":
        return cls(
            Tensor(rng.normal(0, np.sqrt(2.0 / d_in), (d_in, d_hidden)), requires_grad=True),
            Tensor(np.zeros(d_hidden), requires_grad=True),
            Tensor(rng.normal(0, np.sqrt(1.0 / d_hidden), (d_hidden, d_out)), requires_grad=True),
            Tensor(np.zeros(d_out), requires_grad=True),
        )

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"MLP expects width {self.d_in}, got {x.shape[-1]}")
        return matmul(relu(matmul(x, self.w1) + self.b1), self.w2) + self.b2


# world ---------------------------------------------------------------------

def class_means(cfg: SynthConfig) -> np.ndarray:
    """(C+1) x D means; the last row is the background mean (origin)."""
    rng = np.random.default_rng([cfg.seed, 1])
    dirs = rng.normal(size=(cfg.num_classes, cfg.channels))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return np.vstack([cfg.class_separation * dirs, np.zeros(cfg.channels)])


def channel_style(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel scale and offset applied to target features.

    A scalar ``style_scale`` is spread log-normally across channels by
    ``style_spread`` (0 keeps it uniform).
    """
    rng = np.random.default_rng([cfg.seed, 2])
    if np.isscalar(cfg.style_scale):
        gamma = cfg.style_scale * np.exp(cfg.style_spread * rng.normal(size=cfg.channels))
    else:
        gamma = np.asarray(cfg.style_scale, dtype=np.float64)
    beta = np.broadcast_to(np.asarray(cfg.style_offset, dtype=np.float64), (cfg.channels,)).copy()
    return gamma, beta


def _place_boxes(cfg: SynthConfig, rng: np.random.Generator) -> list[GroundTruthBox]:
    occupied = np.zeros((cfg.height, cfg.width), dtype=bool)
    boxes: list[GroundTruthBox] = []
    attempts = 0
    while len(boxes) < cfg.boxes_per_image and attempts < 200 * cfg.boxes_per_image:
        attempts += 1
        h = int(rng.integers(cfg.box_min, cfg.box_max + 1))
        w = int(rng.integers(cfg.box_min, cfg.box_max + 1))
        y0 = int(rng.integers(0, cfg.height - h + 1))
        x0 = int(rng.integers(0, cfg.width - w + 1))
        if occupied[y0:y0 + h, x0:x0 + w].any():
            continue
        occupied[y0:y0 + h, x0:x0 + w] = True
        boxes.append(GroundTruthBox(x0, y0, x0 + w, y0 + h, int(rng.integers(cfg.num_classes))))
    return boxes


def label_map(cfg: SynthConfig, boxes: Sequence[GroundTruthBox]) -> np.ndarray:
    labels = np.full((cfg.height, cfg.width), cfg.num_classes, dtype=np.int64)
    for b in boxes:
        labels[b.y0:b.y1, b.x0:b.x1] = b.category
    return labels


def _draw_scene(cfg, rng, means):
    boxes = _place_boxes(cfg, rng)
    labels = label_map(cfg, boxes)
    noise = rng.normal(0.0, cfg.noise_std, (cfg.height, cfg.width, cfg.channels))
    return boxes, labels, means[labels] + noise


def _posterior(x: np.ndarray, means: np.ndarray, var: np.ndarray, prior: np.ndarray) -> np.ndarray:
    # isotropic-per-channel Gaussian class posterior, x: H x W x D
    diff = x[..., None, :] - means  # H x W x (C+1) x D
    loglik = -0.5 * (diff * diff / var).sum(axis=-1) + np.log(prior)
    loglik -= loglik.max(axis=-1, keepdims=True)
    p = np.exp(loglik)
    return p / p.sum(axis=-1, keepdims=True)


def generate_domain_pair(cfg: SynthConfig, seed: int) -> DomainPair:
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 3, seed])
    means = class_means(cfg)
    gamma, beta = channel_style(cfg)

    src_boxes, _, src = _draw_scene(cfg, rng, means)
    tgt_boxes, tgt_labels, tgt_raw = _draw_scene(cfg, rng, means)
    tgt = gamma * tgt_raw + beta
    tgt = tgt + rng.normal(0.0, cfg.target_noise, tgt.shape)

    area = cfg.boxes_per_image * ((cfg.box_min + cfg.box_max) / 2) ** 2 / (cfg.height * cfg.width)
    area = min(area, 0.9)
    prior = np.append(np.full(cfg.num_classes, area / cfg.num_classes), 1.0 - area)
    if cfg.source_pseudo_scores:
        post = _posterior(tgt, means, np.full(cfg.channels, cfg.noise_std ** 2), prior)
    else:
        var = (gamma * cfg.noise_std) ** 2 + cfg.target_noise ** 2
        post = _posterior(tgt, gamma * means + beta, var, prior)
    scores = post[..., :cfg.num_classes].copy()

    # label noise: move the winning score onto a random wrong class
    flip = rng.random((cfg.height, cfg.width)) < cfg.label_noise
    shift = rng.integers(1, cfg.num_classes, (cfg.height, cfg.width))
    rows, cols = np.nonzero(flip)
    for r, c in zip(rows, cols):
        scores[r, c] = np.roll(scores[r, c], int(shift[r, c]))
    del tgt_labels

    return DomainPair(
        source=FeatureMap(src, SOURCE),
        source_boxes=src_boxes,
        target=FeatureMap(tgt, TARGET),
        target_scores=ScoreMap(np.clip(scores, 0.0, 1.0)),
        target_boxes=tgt_boxes,
    )


# sampling ------------------------------------------------------------------

def sample_source_nodes(fm: FeatureMap, boxes: Sequence[GroundTruthBox], per_box: int,
                        background: int | None, seed, num_classes: int) -> RawNodeSet:
    """Uniformly sample ``per_box`` pixels per box plus ``background`` pixels outside all boxes.

    ``background=None`` samples as many background pixels as foreground ones.
    A box with fewer pixels than ``per_box`` is sampled with replacement and a
    warning is recorded on the returned node set.
    """
    if per_box < 1:
        raise ValueError("per_box must be >= 1")
    rng = np.random.default_rng(seed)
    origins: list[tuple[int, int]] = []
    labels: list[int] = []
    warnings: list[str] = []
    inside = np.zeros((fm.height, fm.width), dtype=bool)
    for b in boxes:
        pix = b.pixels()
        inside[b.y0:b.y1, b.x0:b.x1] = True
        replace = len(pix) < per_box
        if replace:
            msg = f"box {b} has {len(pix)} pixels < per_box={per_box}; sampling with replacement"
            log.warning(msg)
            warnings.append(msg)
        idx = rng.choice(len(pix), size=per_box, replace=replace)
        origins.extend(pix[i] for i in idx)
        labels.extend([b.category] * per_box)
    n_bg = len(labels) if background is None else background
    if n_bg:
        free = np.argwhere(~inside)
        idx = rng.choice(len(free), size=n_bg, replace=len(free) < n_bg)
        origins.extend((int(r), int(c)) for r, c in free[idx])
        labels.extend([num_classes] * n_bg)
    origins_arr = np.asarray(origins, dtype=np.int64).reshape(-1, 2)
    emb = fm.values[origins_arr[:, 0], origins_arr[:, 1]]
    return RawNodeSet(Tensor(emb), np.asarray(labels, dtype=np.int64), fm.domain_tag,
                      origins_arr, warnings)


def sample_target_nodes(fm: FeatureMap, scores: ScoreMap, tau: float,
                        limit: int | None = None, seed=None) -> RawNodeSet:
    """Threshold pseudo scores: max score > tau is foreground, otherwise background.

    With ``limit`` set, at most ``limit`` foreground and ``limit`` background
    pixels are kept (uniformly, seeded); the rest stay unsampled.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    s = scores.values
    num_classes = s.shape[-1]
    best = s.max(axis=-1)
    fg = np.argwhere(best > tau)
    bg = np.argwhere(best <= tau)
    if len(fg) == 0:
        raise EmptyForegroundError(
            f"no pixel has a pseudo score above tau={tau}; lower tau or regenerate the data")
    if limit is not None:
        rng = np.random.default_rng(seed)
        if len(fg) > limit:
            fg = fg[np.sort(rng.choice(len(fg), limit, replace=False))]
        if len(bg) > limit:
            bg = bg[np.sort(rng.choice(len(bg), limit, replace=False))]
    fg_labels = s[fg[:, 0], fg[:, 1]].argmax(axis=-1)
    origins = np.vstack([fg, bg]).astype(np.int64)
    labels = np.concatenate([fg_labels, np.full(len(bg), num_classes)]).astype(np.int64)
    emb = fm.values[origins[:, 0], origins[:, 1]]
    return RawNodeSet(Tensor(emb), labels, fm.domain_tag, origins)


def project_nodes(raw: RawNodeSet, mlp: MLPParams) -> NodeSet:
    """Map sampled pixel features into the graph embedding space."""
    return NodeSet(
        embeddings=mlp(raw.embeddings),
        labels=raw.labels.copy(),
        domain_tag=raw.domain_tag,
        hallucinated=np.zeros(len(raw.labels), dtype=bool),
    )
