"""Location tower: feature encoder plus Deep & Cross network.

Nothing here is indexed by city or by location id, so one parameter set
embeds the locations of any city from their features alone.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import TOKEN_REAL
from .geo import N_POI, N_RANKS
from .layers import FeedForward, Linear, Module, normal_param, uniform_param


class LocationEncoder(Module):
    """E_l = concat(poi block d/2, geo block d/4, rank block d/4).

    POI counts are log1p-compressed before the projection; fractions pass
    through. EOS/PAD positions are replaced by two learned rows.
    """

    def __init__(self, d, rng):
        if d % 4:
            raise ValueError(f"embedding dimension {d} must be divisible by 4")
        self.d = d
        self.poi = Linear(2 * N_POI, d // 2, rng)
        self.geo = Linear(2, d // 4, rng)
        self.rank = normal_param(rng, (N_RANKS, d // 4))
        self.special = normal_param(rng, (2, d))  # row 0 PAD, row 1 EOS

    def __call__(self, poi, geo, rank, token=None):
        p = np.array(poi, dtype=np.float64)
        p[..., :N_POI] = np.log1p(np.maximum(p[..., :N_POI], 0.0))
        rank = np.asarray(rank)
        if token is not None:
            rank = np.where(np.asarray(token) == TOKEN_REAL, rank, 0)
        e = ad.concat([self.poi(Tensor(p)), self.geo(Tensor(geo)),
                       ad.embedding_lookup(self.rank, rank)])
        if token is None:
            return e
        token = np.asarray(token)
        real = token == TOKEN_REAL
        special = ad.embedding_lookup(self.special, np.where(real, 0, token))
        return ad.where(real[..., None], e, special)


class CrossNet(Module):
    """Stack of x_{l+1} = x0 * (x_l . w_l) + b_l + x_l."""

    def __init__(self, d, n_layers, rng):
        self.w = [uniform_param(rng, (d, 1), d) for _ in range(n_layers)]
        self.b = [uniform_param(rng, (d,), d) for _ in range(n_layers)]

    @staticmethod
    def layer(x0, x, w, b):
        return x0 * ad.matmul(x, w) + b + x

    def __call__(self, x0):
        x = x0
        for w, b in zip(self.w, self.b):
            x = self.layer(x0, x, w, b)
        return x


class LocationTower(Module):
    def __init__(self, d, rng, cross_layers=2, deep_hidden=None):
        self.encoder = LocationEncoder(d, rng)
        self.cross = CrossNet(d, cross_layers, rng)
        self.deep = FeedForward(d, deep_hidden or 2 * d, rng)
        self.proj = Linear(2 * d, d, rng)

    def embed(self, poi, geo, rank):
        """(E_l, L) for a city's N locations; L = proj(concat(cross(E_l), deep(E_l)))."""
        if len(rank) == 0:
            raise ValueError("location table is empty")
        e = self.encoder(poi, geo, rank)
        return e, self.proj(ad.concat([self.cross(e), self.deep(e)]))

    def __call__(self, poi, geo, rank):
        return self.embed(poi, geo, rank)[1]
