"""Per-category prototype memory with momentum updates and hallucinated nodes."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nodes import NodeSet
from .numerics import Tensor

BANK_FORMAT = "nodealign-bank"
BANK_VERSION = 1


class BankFormatError(ValueError):
    pass


@dataclass
class MemoryBank:
    prototypes: np.ndarray  # (C+1) x D_g
    seen: np.ndarray  # bool, C+1
    momentum: float = 0.9

    @classmethod
    def empty(cls, num_categories: int, dim: int, momentum: float = 0.9) -> "MemoryBank":
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        return cls(np.zeros((num_categories, dim)), np.zeros(num_categories, dtype=bool), momentum)

    @property
    def num_categories(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def copy(self) -> "MemoryBank":
        return MemoryBank(self.prototypes.copy(), self.seen.copy(), self.momentum)

    # serialization: a 4-byte little-endian header length, a JSON header,
    # then the prototype matrix as little-endian float64 in row-major order
    def to_bytes(self) -> bytes:
        header = json.dumps({
            "format": BANK_FORMAT,
            "version": BANK_VERSION,
            "shape": list(self.prototypes.shape),
            "seen": [bool(s) for s in self.seen],
            "momentum": self.momentum,
        }, sort_keys=True).encode()
        return struct.pack("<I", len(header)) + header + self.prototypes.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MemoryBank":
        (n,) = struct.unpack("<I", blob[:4])
        header = json.loads(blob[4:4 + n])
        if header.get("format") != BANK_FORMAT or header.get("version") != BANK_VERSION:
            raise BankFormatError(f"unsupported bank format {header.get('format')} "
                                  f"v{header.get('version')}")
        shape = tuple(header["shape"])
        protos = np.frombuffer(blob[4 + n:], dtype="<f8").reshape(shape).astype(np.float64)
        return cls(protos, np.asarray(header["seen"], dtype=bool), float(header["momentum"]))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "MemoryBank":
        return cls.from_bytes(Path(path).read_bytes())


def bank_update(bank: MemoryBank, nodes: NodeSet) -> MemoryBank:
    """Momentum-update the prototypes of every category present among real nodes.

    Hallucinated nodes are ignored and no gradient flows into the bank.
    """
    out = bank.copy()
    real = ~nodes.hallucinated
    emb = nodes.embeddings.data[real]
    labels = nodes.labels[real]
    if np.any(labels < 0) or np.any(labels >= bank.num_categories):
        raise ValueError(f"node labels must lie in [0, {bank.num_categories - 1}]")
    for c in np.unique(labels):
        m = emb[labels == c].mean(axis=0)
        if out.seen[c]:
            out.prototypes[c] = out.momentum * out.prototypes[c] + (1.0 - out.momentum) * m
        else:
            out.prototypes[c] = m
            out.seen[c] = True
    return out


def missing_categories(bank: MemoryBank, nodes: NodeSet) -> set[int]:
    present = set(int(c) for c in np.unique(nodes.labels))
    return {int(c) for c in np.flatnonzero(bank.seen)} - present


def hallucinate(bank: MemoryBank, missing, per_cat: int = 4, noise: float | None = None,
                seed=None, domain_tag: str = "source") -> NodeSet:
    """Sample ``per_cat`` nodes around each missing category's prototype.

    ``noise=None`` uses 1% of the prototype's RMS value as the standard deviation.
    """
    missing = sorted(int(c) for c in missing)
    for c in missing:
        if not bank.seen[c]:
            raise ValueError(f"category {c} has no prototype yet")
    rng = np.random.default_rng(seed)
    rows, labels = [], []
    for c in missing:
        proto = bank.prototypes[c]
        sigma = 0.01 * np.sqrt(np.mean(proto ** 2)) if noise is None else noise
        rows.append(proto + sigma * rng.normal(size=(per_cat, bank.dim)))
        labels.extend([c] * per_cat)
    emb = np.vstack(rows) if rows else np.zeros((0, bank.dim))
    return NodeSet(Tensor(emb), np.asarray(labels, dtype=np.int64), domain_tag,
                   hallucinated=np.ones(len(labels), dtype=bool))
