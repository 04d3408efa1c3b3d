"""End-to-end training on synthetic two-domain batches."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import covalign, graphopt, membank, refine, synthdata
from .nodes import NodeSet
from .numerics import Tensor
from .synthdata import MLPParams, SynthConfig

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"NODEALIGN-CKPT\n"
CHECKPOINT_VERSION = 1

# (features, domain) -> scalar; stands in for the detector-side losses
LossHook = Callable[[Tensor, str], Tensor]


def zero_hook(features: Tensor, domain: str) -> Tensor:
    return Tensor(0.0)


class CheckpointVersionError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


class TrainStepError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"training failed at step {step}: {message}")
        self.step = step

    def __reduce__(self):
        return (RuntimeError, (str(self),))


@dataclass
class TrainConfig:
    lambda1: float = 0.1
    lambda2: float = 0.1
    lr: float = 0.0025
    momentum: float = 0.99
    weight_decay: float = 1e-4
    epochs: int = 40
    steps_per_epoch: int = 50
    stats_epochs: int = 30
    k: int = 4
    m: int = 1
    ood_p: float = 0.03
    temperature: float = 0.06
    bank_momentum: float = 0.9
    halluc_per_cat: int = 4
    halluc_noise: float | None = None
    hidden_dim: int = 32
    implicit_dim: int = 16
    message_passing: bool = True
    use_cnc: bool = True
    use_na: bool = True
    eval_batches: int = 4
    seed: int = 0
    data: SynthConfig = field(default_factory=SynthConfig)

    def validate(self) -> None:
        self.data.validate()
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if not self.stats_epochs < self.epochs:
            raise ValueError("stats_epochs (n) must be smaller than epochs")
        if self.stats_epochs < 1:
            raise ValueError("stats_epochs (n) must be >= 1")
        if not 1 <= self.m < self.k:
            raise ValueError("need 1 <= m < k")
        if not 0.0 <= self.ood_p < 1.0:
            raise ValueError("ood_p must lie in [0, 1)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 < self.bank_momentum < 1.0:
            raise ValueError("bank_momentum must lie in (0, 1)")
        if self.steps_per_epoch < 1 or self.epochs < 1:
            raise ValueError("epochs and steps_per_epoch must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        data = d.pop("data", {})
        if isinstance(data.get("style_scale"), list):
            data["style_scale"] = tuple(data["style_scale"])
        if isinstance(data.get("style_offset"), list):
            data["style_offset"] = tuple(data["style_offset"])
        return cls(**d, data=SynthConfig(**data))

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name != "data"]


@dataclass
class LossBreakdown:
    l_cnc: float
    l_na: float
    l_node: float
    l_ga: float
    l_det: float
    total: float
    lambda1: float
    lambda2: float

    def weighted_sum(self) -> float:
        return (self.lambda1 * self.l_cnc + self.lambda2 * self.l_na + self.l_ga
                + self.l_det + self.l_node)


@dataclass
class MetricsRecord:
    epoch: int
    source_acc: float
    target_acc: float
    l_cnc: float
    l_na: float
    l_node: float
    l_ga: float
    l_det: float
    total: float
    mask_density: float
    wall_clock: float = 0.0

    CSV_FIELDS = ("epoch", "l_cnc", "l_na", "l_node", "l_ga", "l_det", "total",
                  "source_acc", "target_acc", "mask_density")

    def csv_row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, f))) for f in self.CSV_FIELDS[1:]]


# model ---------------------------------------------------------------------

@dataclass
class Model:
    projector: MLPParams
    rec_attn: refine.AttentionParams
    implicit_head: MLPParams
    shared_attn: refine.AttentionParams
    graph: graphopt.GraphOptParams

    @classmethod
    def init(cls, cfg: TrainConfig) -> "Model":
        rng = np.random.default_rng([cfg.seed, 11])
        d, dg = cfg.data.channels, cfg.data.embed_dim
        return cls(
            MLPParams.init(d, cfg.hidden_dim, dg, rng),
            refine.AttentionParams.init(dg, rng),
            MLPParams.init(dg, dg, cfg.implicit_dim, rng),
            refine.AttentionParams.init(dg, rng),
            graphopt.GraphOptParams.init(dg, cfg.data.num_classes + 1, rng),
        )

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for prefix, mod in (("projector", self.projector), ("rec_attn", self.rec_attn),
                            ("implicit_head", self.implicit_head),
                            ("shared_attn", self.shared_attn)):
            for name in mod.__dataclass_fields__:
                out.append((f"{prefix}.{name}", getattr(mod, name)))
        g = self.graph
        for name in ("wq", "wk", "wv"):
            out.append((f"graph.attn.{name}", getattr(g.attn, name)))
        for name in ("ln_gain", "ln_bias", "cls_w", "cls_b"):
            out.append((f"graph.{name}", getattr(g, name)))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


@dataclass
class TrainState:
    model: Model
    bank_s: membank.MemoryBank
    bank_t: membank.MemoryBank
    stats: covalign.CovarianceStats
    mask: covalign.StyleMask | None = None
    velocities: list[np.ndarray] | None = None
    step: int = 0
    mask_builds: int = 0

    @classmethod
    def init(cls, cfg: TrainConfig) -> "TrainState":
        cats = cfg.data.num_classes + 1
        dg = cfg.data.embed_dim
        model = Model.init(cfg)
        return cls(
            model,
            membank.MemoryBank.empty(cats, dg, cfg.bank_momentum),
            membank.MemoryBank.empty(cats, dg, cfg.bank_momentum),
            covalign.CovarianceStats(dg),
            velocities=[np.zeros_like(p.data) for p in model.parameters()],
        )


# losses and optimizer ------------------------------------------------------

def composite_loss(l_cnc, l_na, l_node, cfg: TrainConfig, l_ga=None, l_det=None):
    """Weighted objective; returns ``(total_tensor, LossBreakdown)``.

    Missing detector-side terms default to zero.
    """
    l_ga = Tensor(0.0) if l_ga is None else l_ga
    l_det = Tensor(0.0) if l_det is None else l_det
    parts = {"l_cnc": l_cnc, "l_na": l_na, "l_node": l_node, "l_ga": l_ga, "l_det": l_det}
    for name, t in parts.items():
        if not math.isfinite(float(t.data)):
            raise NonFiniteLossError(f"{name} is not finite ({float(t.data)})")
    total = cfg.lambda1 * l_cnc + cfg.lambda2 * l_na + l_ga + l_det + l_node
    bd = LossBreakdown(*(float(parts[k].data) for k in parts), float(total.data),
                       cfg.lambda1, cfg.lambda2)
    return total, bd


def sgd_step(params, grads, velocities, lr=0.0025, momentum=0.99, weight_decay=1e-4):
    """Momentum SGD with L2 decay folded into the velocity, updated in place."""
    for p, g, v in zip(params, grads, velocities):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        v *= momentum
        v += g + weight_decay * p.data
        p.data -= lr * v
    return params, velocities


# pipeline ------------------------------------------------------------------

def _batch_seed(cfg: TrainConfig, step: int) -> int:
    return cfg.seed * 1_000_003 + step


def _eval_seed(i: int) -> int:
    return 2 ** 40 + i


@dataclass
class Batch:
    raw_s: synthdata.RawNodeSet
    raw_t: synthdata.RawNodeSet
    true_t: np.ndarray


def make_batch(data: SynthConfig, seed: int, ground_truth_target: bool = False) -> Batch:
    pair = synthdata.generate_domain_pair(data, seed)
    raw_s = synthdata.sample_source_nodes(pair.source, pair.source_boxes, data.per_box,
                                          data.background, [seed, 1], data.num_classes)
    if ground_truth_target:
        raw_t = synthdata.sample_source_nodes(pair.target, pair.target_boxes, data.per_box,
                                              data.background, [seed, 2], data.num_classes)
    else:
        limit = data.target_nodes or data.per_box * data.boxes_per_image
        raw_t = synthdata.sample_target_nodes(pair.target, pair.target_scores, data.tau,
                                              limit=limit, seed=[seed, 2])
    truth = synthdata.label_map(data, pair.target_boxes)
    true_t = truth[raw_t.pixel_origins[:, 0], raw_t.pixel_origins[:, 1]]
    return Batch(raw_s, raw_t, true_t)


@dataclass
class Forward:
    l_cnc: Tensor
    e_s: NodeSet
    e_t: NodeSet
    joint: NodeSet
    logits: Tensor
    v_raw_s: NodeSet
    v_raw_t: NodeSet


def _refine_domain(state, cfg, v_raw: NodeSet, bank, seed):
    missing = membank.missing_categories(bank, v_raw)
    delta = membank.hallucinate(bank, missing, cfg.halluc_per_cat, cfg.halluc_noise, seed,
                                v_raw.domain_tag)
    v_star = refine.enhance_with_hallucinations(v_raw, delta)
    v = refine.reconstruct_nodes(v_star, state.model.rec_attn)
    return v_star, v


def forward(state: TrainState, cfg: TrainConfig, batch: Batch, seed: int,
            compute_cnc: bool = True) -> Forward:
    model = state.model
    v_raw_s = synthdata.project_nodes(batch.raw_s, model.projector)
    v_raw_t = synthdata.project_nodes(batch.raw_t, model.projector)
    v_raw_s.true_labels = batch.raw_s.labels.copy()
    v_raw_t.true_labels = batch.true_t.copy()
    v_star_s, v_s = _refine_domain(state, cfg, v_raw_s, state.bank_s, [seed, 3])
    v_star_t, v_t = _refine_domain(state, cfg, v_raw_t, state.bank_t, [seed, 4])
    if compute_cnc:
        tri_s = refine.implicit_project(v_raw_s, v_s, v_star_s, model.implicit_head, True)
        tri_t = refine.implicit_project(v_raw_t, v_t, v_star_t, model.implicit_head, False)
        l_cnc = refine.cnc_loss(tri_s, tri_t, cfg.temperature)
    else:
        l_cnc = Tensor(0.0)
    e_s = covalign.shared_attention(v_s, model.shared_attn)
    e_t = covalign.shared_attention(v_t, model.shared_attn)
    joint = graphopt.message_pass(e_s, e_t, model.graph, attend=cfg.message_passing)
    logits = graphopt.classify(joint, model.graph)
    return Forward(l_cnc, e_s, e_t, joint, logits, v_raw_s, v_raw_t)


def train_step(state: TrainState, cfg: TrainConfig, epoch: int,
               ga_hook: LossHook = zero_hook, det_hook: LossHook = zero_hook):
    seed = _batch_seed(cfg, state.step)
    batch = make_batch(cfg.data, seed)
    fwd = forward(state, cfg, batch, seed, compute_cnc=cfg.use_cnc)

    if epoch < cfg.stats_epochs:
        state.stats = covalign.stats_accumulate(state.stats, fwd.e_s.embeddings,
                                                fwd.e_t.embeddings)
    elif state.mask is None:
        xi = covalign.stats_finalize(state.stats)
        state.mask = covalign.build_mask(xi, cfg.k, cfg.m, seed=[cfg.seed, 5])
        state.mask_builds += 1
    if state.mask is not None and cfg.use_na:
        l_na = covalign.na_loss(fwd.e_s.embeddings, fwd.e_t.embeddings, state.mask)
    else:
        l_na = Tensor(0.0)

    joint = graphopt.ood_downweight(fwd.joint, fwd.logits, cfg.ood_p)
    l_node = graphopt.node_loss(joint, fwd.logits)
    feats = fwd.joint.embeddings
    l_ga = ga_hook(feats, "joint")
    l_det = det_hook(feats, "joint")
    total, bd = composite_loss(fwd.l_cnc, l_na, l_node, cfg, l_ga, l_det)

    params = state.model.parameters()
    for p in params:
        p.zero_grad()
    total.backward()
    sgd_step(params, [p.grad for p in params], state.velocities, cfg.lr, cfg.momentum,
             cfg.weight_decay)
    state.bank_s = membank.bank_update(state.bank_s, fwd.v_raw_s)
    state.bank_t = membank.bank_update(state.bank_t, fwd.v_raw_t)
    state.step += 1
    return bd, joint, fwd.logits, len(fwd.e_s)


def accuracy_on(state: TrainState, cfg: TrainConfig, batches: list[Batch],
                seeds: list[int]) -> tuple[float, float]:
    correct = np.zeros(2)
    count = np.zeros(2)
    for batch, seed in zip(batches, seeds):
        fwd = forward(state, cfg, batch, seed, compute_cnc=False)
        pred = fwd.logits.data.argmax(axis=1)
        ns = len(fwd.e_s)
        truth = fwd.joint.true_labels
        for dom, sl in enumerate((slice(0, ns), slice(ns, None))):
            correct[dom] += (pred[sl] == truth[sl]).sum()
            count[dom] += len(truth[sl])
    acc = correct / np.maximum(count, 1)
    return float(acc[0]), float(acc[1])


def eval_batches(cfg: TrainConfig, n: int) -> tuple[list[Batch], list[int]]:
    seeds = [_eval_seed(i) for i in range(n)]
    return [make_batch(cfg.data, s, ground_truth_target=True) for s in seeds], seeds


@dataclass
class TrainResult:
    records: list[MetricsRecord]
    state: TrainState
    config: TrainConfig
    breakdowns: list[LossBreakdown] = field(default_factory=list)


def train(cfg: TrainConfig, ga_hook: LossHook = zero_hook, det_hook: LossHook = zero_hook,
          on_step: Callable | None = None, ood_csv=None) -> TrainResult:
    cfg.validate()
    state = TrainState.init(cfg)
    held_out, held_seeds = eval_batches(cfg, cfg.eval_batches)
    records: list[MetricsRecord] = []
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        sums = np.zeros(6)
        for _ in range(cfg.steps_per_epoch):
            try:
                bd, joint, logits, n_src = train_step(state, cfg, epoch, ga_hook, det_hook)
            except Exception as exc:
                raise TrainStepError(state.step, str(exc)) from exc
            if on_step is not None:
                on_step(state, epoch, bd)
            sums += [bd.l_cnc, bd.l_na, bd.l_node, bd.l_ga, bd.l_det, bd.total]
        if ood_csv is not None:
            domains = ["source"] * n_src + ["target"] * (len(joint) - n_src)
            graphopt.write_ood_csv(joint, logits.data, domains, ood_csv, epoch)
        src_acc, tgt_acc = accuracy_on(state, cfg, held_out, held_seeds)
        means = sums / cfg.steps_per_epoch
        density = state.mask.density if state.mask is not None else 0.0
        rec = MetricsRecord(epoch, src_acc, tgt_acc, *means, density,
                            time.perf_counter() - start)
        records.append(rec)
        log.info("epoch %d total=%.4f node=%.4f src=%.3f tgt=%.3f", epoch, rec.total,
                 rec.l_node, src_acc, tgt_acc)
    return TrainResult(records, state, cfg)


# checkpoints ---------------------------------------------------------------
#
# Layout: CHECKPOINT_MAGIC, a little-endian uint32 header length, a UTF-8 JSON
# header, then every array back to back as little-endian float64 (row-major).
# The header lists each array's name, shape and byte offset into that payload,
# together with the config, step counter, bank flags and mask clusters.

def _state_arrays(state: TrainState) -> list[tuple[str, np.ndarray]]:
    arrays = [(f"param.{n}", p.data) for n, p in state.model.named_parameters()]
    arrays += [(f"velocity.{n}", v) for (n, _), v in
               zip(state.model.named_parameters(), state.velocities)]
    arrays += [("bank_s.prototypes", state.bank_s.prototypes),
               ("bank_t.prototypes", state.bank_t.prototypes),
               ("stats.mean", state.stats.mean), ("stats.m2", state.stats.m2),
               ("stats.var_mean", state.stats.var_mean)]
    if state.stats.xi is not None:
        arrays.append(("stats.xi", state.stats.xi))
    if state.mask is not None:
        arrays.append(("mask", state.mask.mask))
    return arrays


def checkpoint_bytes(state: TrainState, cfg: TrainConfig) -> bytes:
    arrays = _state_arrays(state)
    entries, payload, offset = [], [], 0
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.append(raw)
        offset += len(raw)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "step": state.step,
        "mask_builds": state.mask_builds,
        "stats_count": state.stats.count,
        "bank_s_seen": [bool(x) for x in state.bank_s.seen],
        "bank_t_seen": [bool(x) for x in state.bank_t.seen],
        "bank_momentum": state.bank_s.momentum,
        "mask_k": None if state.mask is None else state.mask.k,
        "mask_m": None if state.mask is None else state.mask.m,
        "mask_clusters": None if state.mask is None else [
            [c, [list(ij) for ij in members]] for c, members in state.mask.clusters],
        "arrays": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + struct.pack("<I", len(blob)) + blob + b"".join(payload)


def save_checkpoint(state: TrainState, cfg: TrainConfig, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state, cfg))


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointVersionError(f"{path} is not a checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<I", blob[pos:pos + 4])
    header = json.loads(blob[pos + 4:pos + 4 + n])
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {header.get('version')} != supported {CHECKPOINT_VERSION}")
    base = pos + 4 + n
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(blob[start:start + 8 * count], dtype="<f8") \
            .reshape(e["shape"]).astype(np.float64)
    cfg = TrainConfig.from_dict(header["config"])
    state = TrainState.init(cfg)
    for (name, p), v in zip(state.model.named_parameters(), state.velocities):
        if f"param.{name}" not in arrays or arrays[f"param.{name}"].shape != p.data.shape:
            raise CheckpointVersionError(f"checkpoint lacks a compatible {name}")
        p.data[...] = arrays[f"param.{name}"]
        v[...] = arrays[f"velocity.{name}"]
    mom = header["bank_momentum"]
    state.bank_s = membank.MemoryBank(arrays["bank_s.prototypes"],
                                      np.asarray(header["bank_s_seen"], dtype=bool), mom)
    state.bank_t = membank.MemoryBank(arrays["bank_t.prototypes"],
                                      np.asarray(header["bank_t_seen"], dtype=bool), mom)
    state.stats = covalign.CovarianceStats(cfg.data.embed_dim, header["stats_count"],
                                           arrays["stats.mean"], arrays["stats.m2"],
                                           arrays["stats.var_mean"], arrays.get("stats.xi"))
    if "mask" in arrays:
        clusters = [(c, [tuple(ij) for ij in members])
                    for c, members in header["mask_clusters"]]
        state.mask = covalign.StyleMask(arrays["mask"], clusters, header["mask_k"],
                                        header["mask_m"])
    state.step = header["step"]
    state.mask_builds = header["mask_builds"]
    return state, cfg


def evaluate(checkpoint, cfg: TrainConfig | None = None, batches: int = 20) -> MetricsRecord:
    """Forward-only accuracy on held-out ground-truth-labelled pairs.

    ``checkpoint`` is a path or a ``TrainState``. Nothing in the state is modified.
    """
    if isinstance(checkpoint, TrainState):
        state = checkpoint
        if cfg is None:
            raise ValueError("a config is required when evaluating an in-memory state")
    else:
        state, saved = load_checkpoint(checkpoint)
        if cfg is None:
            cfg = saved
        elif (cfg.data.channels, cfg.data.embed_dim, cfg.data.num_classes) != \
                (saved.data.channels, saved.data.embed_dim, saved.data.num_classes):
            raise CheckpointVersionError("checkpoint shapes do not match the given config")
    held, seeds = eval_batches(cfg, batches)
    src, tgt = accuracy_on(state, cfg, held, seeds)
    density = state.mask.density if state.mask is not None else 0.0
    nan = float("nan")
    return MetricsRecord(-1, src, tgt, nan, nan, nan, nan, nan, nan, density)
