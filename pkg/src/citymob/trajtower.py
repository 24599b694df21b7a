"""Trajectory tower: pre-norm transformer blocks with noisy top-k mixture-of-experts FFNs."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import N_SLOTS
from .layers import FeedForward, LayerNorm, Linear, Module, normal_param, uniform_param


def attention_mask(mask):
    """(B, 1, T, T) boolean: query t may see key s iff s <= t and s is REAL."""
    mask = np.asarray(mask, dtype=bool)
    T = mask.shape[-1]
    causal = np.tril(np.ones((T, T), dtype=bool))
    return (causal[None, :, :] & mask[:, None, :])[:, None]


class MaskedSelfAttention(Module):
    def __init__(self, d, heads, rng):
        if d % heads:
            raise ValueError(f"d={d} not divisible by heads={heads}")
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    def __call__(self, x, mask):
        B, T, d = x.shape
        h, dh = self.heads, d // self.heads

        def split(t):
            return t.reshape(B, T, h, dh).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = ad.matmul(q, k.transpose(2, 3)) * (1.0 / math.sqrt(dh))
        scores = ad.masked_fill(scores, ~attention_mask(mask), -np.inf)
        att = ad.softmax(scores, axis=-1)
        out = ad.matmul(att, v).transpose(1, 2).reshape(B, T, d)
        return self.o(out)


class NoisyTopKGate(Module):
    """softmax(topk(x W_g + n * softplus(x W_n))), noise only when an rng is passed."""

    def __init__(self, d, n_experts, top_k, rng):
        if not 1 <= top_k <= n_experts:
            raise ValueError(f"top_k={top_k} must lie in [1, {n_experts}]")
        self.top_k = top_k
        self.w_gate = uniform_param(rng, (d, n_experts), d)
        self.w_noise = uniform_param(rng, (d, n_experts), d)

    def __call__(self, x, rng=None):
        logits = ad.matmul(x, self.w_gate)
        if rng is not None:
            scale = ad.softplus(ad.matmul(x, self.w_noise))
            logits = logits + scale * rng.standard_normal(logits.shape)
        masked, idx = ad.topk_mask(logits, self.top_k)
        return ad.softmax(masked, axis=-1), idx


class MoELayer(Module):
    def __init__(self, d, n_experts, top_k, hidden, rng):
        self.gate = NoisyTopKGate(d, n_experts, top_k, rng)
        self.experts = [FeedForward(d, hidden, rng) for _ in range(n_experts)]

    def __call__(self, x, rng=None):
        """Sparse mixture: each expert runs only on the tokens routed to it.

        Returns (output, gate weights as an (M, E) array over flattened tokens).
        """
        shape = x.shape
        flat = x.reshape(-1, shape[-1])
        M = flat.shape[0]
        weights, idx = self.gate(flat, rng)
        out = None
        for e, expert in enumerate(self.experts):
            rows = np.nonzero((idx == e).any(axis=-1))[0]
            if rows.size == 0:
                continue
            y = expert(flat[rows]) * weights[rows, e:e + 1]
            part = ad.scatter_rows(y, rows, M)
            out = part if out is None else out + part
        return out.reshape(shape), weights.data

    def dense(self, x):
        """Reference: evaluate every expert and mix with the (k-sparse) gate weights."""
        weights, _ = self.gate(x)
        return sum(expert(x) * weights[..., e:e + 1] for e, expert in enumerate(self.experts))


class MoEBlock(Module):
    def __init__(self, d, heads, n_experts, top_k, hidden, rng):
        self.ln1 = LayerNorm(d)
        self.attn = MaskedSelfAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.moe = MoELayer(d, n_experts, top_k, hidden, rng)

    def __call__(self, x, mask, rng=None):
        x = x + self.attn(self.ln1(x), mask)
        h, gates = self.moe(self.ln2(x), rng)
        return x + h, gates


class TrajectoryTower(Module):
    def __init__(self, d, layers, heads, n_experts, top_k, rng, expert_hidden=None):
        self.time = normal_param(rng, (N_SLOTS, d))
        self.blocks = [MoEBlock(d, heads, n_experts, top_k, expert_hidden or 4 * d, rng)
                       for _ in range(layers)]

    def __call__(self, e_loc, slots, mask, rng=None, gate_log=None):
        """I = Blocks(E_l + E_t). ``gate_log``, if a list, receives per-layer gate arrays."""
        x = e_loc + ad.embedding_lookup(self.time, slots)
        for blk in self.blocks:
            x, gates = blk(x, mask, rng)
            if gate_log is not None:
                gate_log.append(gates)
        return x
