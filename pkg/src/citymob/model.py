"""Dual-tower model: intent embeddings scored against candidate location embeddings."""
from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import IGNORE, PaddedBatch
from .layers import Module
from .loctower import LocationTower
from .trajtower import TrajectoryTower


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    layers: int = 2
    heads: int = 4
    experts: int = 4
    top_k: int = 2
    cross_layers: int = 2
    deep_hidden: int = 0  # 0 -> 2d
    expert_hidden: int = 0  # 0 -> 4d
    max_seq_len: int = 48

    def __post_init__(self):
        if self.d <= 0 or self.d % 4:
            raise ValueError(f"d={self.d} must be a positive multiple of 4")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if not 1 <= self.top_k <= self.experts:
            raise ValueError(f"top_k={self.top_k} must lie in [1, experts={self.experts}]")
        if self.layers < 0 or self.cross_layers < 0 or self.max_seq_len < 2:
            raise ValueError("layers/cross_layers must be >= 0 and max_seq_len >= 2")

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).digest()


FULL_SCALE = ModelConfig(d=512, layers=8, heads=8, experts=4, top_k=2)


def named_rng(seed: int, name: str):
    """Independent, reproducible sub-stream of the run seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class DualTower(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = named_rng(seed, "init")
        self.loc = LocationTower(cfg.d, rng, cfg.cross_layers, cfg.deep_hidden or None)
        self.traj = TrajectoryTower(cfg.d, cfg.layers, cfg.heads, cfg.experts, cfg.top_k, rng,
                                    cfg.expert_hidden or None)

    def intent(self, batch: PaddedBatch, rng=None, gate_log=None):
        e = self.loc.encoder(batch.poi, batch.geo, batch.rank, batch.token)
        return self.traj(e, batch.slot, batch.mask, rng, gate_log)

    def candidates(self, table):
        return self.loc(table.poi, table.geo, table.rank)

    def logits(self, batch: PaddedBatch, table, rng=None, gate_log=None):
        return score(self.intent(batch, rng, gate_log), self.candidates(table))


def score(intent: Tensor, cands: Tensor) -> Tensor:
    """logits[b, t, n] = sum_i I[b, t, i] * L[n, i]."""
    if intent.shape[-1] != cands.shape[-1]:
        raise ad.ShapeError(f"score: intent dim {intent.shape} vs candidates {cands.shape}")
    return ad.matmul(intent, cands.transpose(0, 1))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood over positions whose target is not IGNORE."""
    targets = np.asarray(targets)
    sup = targets != IGNORE
    n = int(sup.sum())
    if n == 0:
        raise ValueError("batch has no supervised positions")
    onehot = np.zeros(logits.shape)
    bi = np.nonzero(sup)
    onehot[bi + (targets[sup],)] = -1.0 / n
    return (ad.log_softmax(logits, axis=-1) * onehot).sum()
