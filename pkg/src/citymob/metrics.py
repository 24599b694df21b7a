"""Acc@k over score rows, with ties resolved toward the lower location index."""
from __future__ import annotations

import numpy as np

from .data import IGNORE


def target_ranks(scores, targets) -> np.ndarray:
    """0-based rank of each target: strictly better candidates plus equal ones with lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != targets.shape[0]:
        raise ValueError(f"scores {scores.shape} and targets {targets.shape} do not align")
    t = scores[np.arange(len(targets)), targets][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    better = (scores > t) | ((scores == t) & (idx < targets[:, None]))
    return better.sum(axis=1)


def acc_at_k(scores, targets, k: int) -> float:
    """Fraction of rows whose target is among the top-k scores."""
    if k < 1:
        raise ValueError("k must be >= 1")
    targets = np.asarray(targets)
    if targets.size == 0:
        raise ValueError("acc_at_k on empty input")
    return float(np.mean(target_ranks(scores, targets) < k))


def supervised_rows(logits, targets):
    """Flatten (B, T, N) logits to the rows with a supervised target."""
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    sup = targets != IGNORE
    return logits[sup], targets[sup]


class AccCounter:
    """Running Acc@k tallies over many batches."""

    def __init__(self, ks=(1, 3, 5)):
        self.ks = tuple(ks)
        self.hits = {k: 0 for k in self.ks}
        self.n = 0

    def update(self, scores, targets):
        if len(targets) == 0:
            return
        r = target_ranks(scores, targets)
        for k in self.ks:
            self.hits[k] += int((r < k).sum())
        self.n += len(targets)

    def result(self) -> dict:
        return {k: (self.hits[k] / self.n if self.n else float("nan")) for k in self.ks}
