"""Seeded multi-city mobility generator with shared archetype transition kernels.

Kernels live on an abstract state space ``[HOME, WORK, site_0 .. site_{S-1}]``.
Sites have fixed positions in the unit square and are projected onto each
city's grid, so two cities drawing users from the same archetypes share
mobility patterns in feature space even though their location ids differ.
HOME and WORK are per-user anchor cells.
"""
from __future__ import annotations

import csv
import math
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from .data import MultiCityCorpus, Trajectory, discretize, write_trajectories
from .geo import N_POI, CityGeometry, LocationTable, write_locations

HOME, WORK = 0, 1
KERNEL_KINDS = ("random", "cycle", "uniform", "uniform_cells")

_RESIDENTIAL_CATS = {11: 4.0, 6: 1.5, 4: 0.5}
_BUSINESS_CATS = {12: 3.0, 5: 2.5, 4: 2.0, 8: 0.8}


class SynthError(ValueError):
    pass


@dataclass
class CitySpec:
    name: str
    rows: int
    cols: int
    users: int
    days: int = 7
    mixing: list | None = None  # weights over archetypes; None = uniform
    center_lat: float = 30.0
    center_lon: float = 115.0
    stay_mean_h: float = 2.5
    stay_shape: float = 2.0

    @property
    def n_locations(self):
        return self.rows * self.cols


@dataclass
class SynthSpec:
    cities: list
    seed: int = 0
    n_archetypes: int = 4
    n_sites: int = 8
    kernel_kind: str = "random"
    kernels: list | None = None  # explicit (S+2)x(S+2) row-stochastic matrices

    def validate(self):
        if self.kernel_kind not in KERNEL_KINDS:
            raise SynthError(f"kernel_kind must be one of {KERNEL_KINDS}")
        if not self.cities:
            raise SynthError("spec has no cities")
        names = [c.name for c in self.cities]
        if len(set(names)) != len(names):
            raise SynthError("duplicate city names")
        for c in self.cities:
            if c.n_locations < 8:
                raise SynthError(f"city {c.name}: N={c.n_locations} < 8")
            if c.n_locations < self.n_sites + 2:
                raise SynthError(f"city {c.name}: {c.n_locations} cells cannot host "
                                 f"{self.n_sites} sites plus home/work anchors")
            if c.users < 1 or c.days < 1:
                raise SynthError(f"city {c.name}: users and days must be positive")
            w = self.mixing_for(c)
            if len(w) != self.n_archetypes or np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
                raise SynthError(f"city {c.name}: mixing weights must lie on the simplex "
                                 f"over {self.n_archetypes} archetypes")
        if self.kernel_kind == "cycle" and self.n_sites < 3:
            raise SynthError("cycle kernel needs at least 3 sites")
        if self.kernel_kind == "uniform" and self.n_sites < 2:
            raise SynthError("uniform kernel needs at least 2 sites")

    def mixing_for(self, city: CitySpec) -> np.ndarray:
        if city.mixing is None:
            return np.full(self.n_archetypes, 1.0 / self.n_archetypes)
        return np.asarray(city.mixing, dtype=np.float64)


@dataclass
class CityOutput:
    table: LocationTable
    trajectories: list
    users: list  # (user_id, archetype, home_id, work_id)
    site_cells: list
    n_days: int


@dataclass
class SynthResult:
    spec: SynthSpec
    cities: dict = field(default_factory=dict)


def _rng(seed, *names):
    key = [seed] + [zlib.crc32(str(n).encode()) for n in names]
    return np.random.default_rng(key)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def cycle_kernel(n_sites: int, cycle=(0, 1, 2)) -> np.ndarray:
    """Deterministic walk through ``cycle`` (site indices)."""
    n = n_sites + 2
    K = np.zeros((n, n))
    for a, b in zip(cycle, cycle[1:] + cycle[:1]):
        K[2 + a, 2 + b] = 1.0
    for i in range(n):
        if K[i].sum() == 0:
            K[i, 2 + cycle[0]] = 1.0
    return K


def uniform_site_kernel(n_sites: int) -> np.ndarray:
    """Every site moves uniformly to one of the other sites."""
    n = n_sites + 2
    K = np.zeros((n, n))
    K[:, 2:] = 1.0
    for i in range(n):
        K[i, i] = 0.0
    return K / K.sum(axis=1, keepdims=True)


def random_kernels(n_archetypes: int, n_sites: int, rng) -> list:
    """Home/work anchored archetypes, each favouring a few sites."""
    S = n_sites
    out = []
    for a in range(n_archetypes):
        K = np.zeros((S + 2, S + 2))
        pref = rng.choice(S, size=min(3, S), replace=False)
        worker = a % 4 != 3
        p_work = rng.uniform(0.5, 0.8) if worker else 0.0
        K[HOME, WORK] = p_work
        K[HOME, 2 + pref] = (1 - p_work) * rng.dirichlet(np.full(len(pref), 0.7))
        if worker:
            K[WORK, HOME] = 0.35
            K[WORK, 2 + pref] = 0.65 * rng.dirichlet(np.full(len(pref), 0.7))
        else:
            K[WORK, HOME] = 1.0
        for s in range(S):
            row = np.zeros(S + 2)
            row[HOME] = 0.4
            row[WORK] = 0.15 if worker else 0.0
            others = [p for p in pref if p != s]
            if others:
                row[2 + np.array(others)] = (1 - row.sum()) * rng.dirichlet(np.full(len(others), 0.7))
            row[HOME] = 1.0 - row[WORK] - row[2:].sum()
            K[2 + s] = row
        out.append(K)
    return out


def _check_kernel(K, n_states):
    K = np.asarray(K, dtype=np.float64)
    if K.shape != (n_states, n_states) or np.any(K < 0) or np.any(np.abs(K.sum(1) - 1) > 1e-9):
        raise SynthError(f"kernel must be a {n_states}x{n_states} row-stochastic matrix")
    return K


# ---------------------------------------------------------------------------
# geography
# ---------------------------------------------------------------------------

def site_positions(n_sites: int, rng) -> np.ndarray:
    """Jittered lattice points in the unit square (shared by every city)."""
    m = math.ceil(math.sqrt(n_sites))
    cells = rng.permutation(m * m)[:n_sites]
    jitter = rng.uniform(-0.08, 0.08, size=(n_sites, 2)) / m * 3
    pos = np.column_stack([(cells % m + 0.5) / m, (cells // m + 0.5) / m]) + jitter
    return np.clip(pos, 0.01, 0.99)


def _abstract_coords(rows, cols):
    r, c = np.divmod(np.arange(rows * cols), cols)
    return np.column_stack([(c + 0.5) / cols, (r + 0.5) / rows])


def _land_use(uv):
    d2 = ((uv - 0.5) ** 2).sum(axis=1)
    business = np.exp(-d2 / (2 * 0.18 ** 2))
    residential = 1.0 - 0.85 * business
    return residential, business


def _site_profiles(n_sites, rng):
    return [rng.choice(N_POI, size=3, replace=False) for _ in range(n_sites)]


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def _sample(rng, row):
    return int(np.searchsorted(np.cumsum(row), rng.random() * row.sum(), side="right"))


def _stay_seconds(rng, city: CitySpec):
    hours = rng.gamma(city.stay_shape, city.stay_mean_h / city.stay_shape)
    return max(0.5, hours) * 3600.0


def _simulate_anchored(rng, K, state_cell, city: CitySpec):
    """Day-night rhythm: leave home in the morning, follow K, return home at night."""
    pts = []
    state = HOME
    pts.append((state_cell[HOME], 0, 0))
    for day in range(city.days):
        t = float(np.clip(rng.normal(7.5, 0.75), 5.0, 10.0)) * 3600
        evening = float(np.clip(rng.normal(21.0, 1.0), 18.0, 23.0)) * 3600
        while True:
            nxt = _sample(rng, K[state])
            d, s = discretize(day, t)
            pts.append((state_cell[nxt], s, d))
            state = nxt
            t += _stay_seconds(rng, city)
            if t >= evening:
                if state != HOME:
                    d, s = discretize(day, min(t, 23.5 * 3600))  # stays on the same day
                    pts.append((state_cell[HOME], s, d))
                    state = HOME
                break
    return pts


def _simulate_chain(rng, step, start, city: CitySpec):
    """Continuous chain without anchors; ``step(rng, loc) -> loc``."""
    pts = [(start, 0, 0)]
    loc, day, t = start, 0, 0.0
    while True:
        t += _stay_seconds(rng, city)
        while t >= 86400:
            t -= 86400
            day += 1
        if day >= city.days:
            break
        loc = step(rng, loc)
        d, s = discretize(day, t)
        if d >= city.days:
            break
        pts.append((loc, s, d))
    return pts


def _generate_city(spec: SynthSpec, city: CitySpec, kernels, site_uv, profiles):
    rng = _rng(spec.seed, "city", city.name)
    N = city.n_locations
    geom = CityGeometry.from_grid(city.name, city.center_lat, city.center_lon, city.rows, city.cols)
    uv = _abstract_coords(city.rows, city.cols)
    site_cells = [int(min(int(v * city.rows), city.rows - 1) * city.cols
                      + min(int(u * city.cols), city.cols - 1)) for u, v in site_uv]
    if len(set(site_cells)) != len(site_cells):
        raise SynthError(f"city {city.name}: {city.rows}x{city.cols} grid too coarse, "
                         f"sites share a cell")
    residential, business = _land_use(uv)

    lam = np.full((N, N_POI), 0.2)
    for cat, w in _RESIDENTIAL_CATS.items():
        lam[:, cat] += w * residential
    for cat, w in _BUSINESS_CATS.items():
        lam[:, cat] += w * business
    for cell, prof in zip(site_cells, profiles):
        lam[cell, prof[0]] += 10.0
        lam[cell, prof[1]] += 6.0
        lam[cell, prof[2]] += 3.0
    poi = rng.poisson(lam)

    free = np.setdiff1d(np.arange(N), site_cells)
    p_home = residential[free] ** 2 + 0.01
    p_work = business[free] ** 2 + 0.01
    weights = spec.mixing_for(city)

    trajs, users = [], []
    for u in range(city.users):
        urng = _rng(spec.seed, "user", city.name, u)
        uid = f"{city.name}_u{u:05d}"
        arche = _sample(urng, weights)
        home = int(free[_sample(urng, p_home)])
        pw = p_work.copy()
        pw[free == home] = 0.0
        work = int(free[_sample(urng, pw)])
        kind = spec.kernel_kind
        if kind == "random":
            cells = [home, work] + site_cells
            pts = _simulate_anchored(urng, kernels[arche], cells, city)
        elif kind == "uniform_cells":
            def step(r, loc, N=N):
                j = int(r.integers(N - 1))
                return j + (j >= loc)
            pts = _simulate_chain(urng, step, int(urng.integers(N)), city)
        else:
            K = kernels[arche]
            cell_of = {2 + s: c for s, c in enumerate(site_cells)}
            state_of = {c: st for st, c in cell_of.items()}
            start = site_cells[0] if kind == "cycle" else site_cells[int(urng.integers(len(site_cells)))]
            pts = _simulate_chain(urng, lambda r, loc: cell_of[_sample(r, K[state_of[loc]])],
                                  start, city)
        trajs.append(Trajectory(uid, city.name, pts))
        users.append((uid, arche, home, work))

    visits = np.zeros(N, dtype=np.int64)
    for tr in trajs:
        for loc, _, _ in tr.points:
            visits[loc] += 1
    lat, lon = zip(*(geom.cell_center(i) for i in range(N)))
    table = LocationTable(city.name, np.arange(N), np.array(lat), np.array(lon), poi, visits)
    return CityOutput(table, trajs, users, site_cells, city.days)


def build_kernels(spec: SynthSpec) -> list:
    n = spec.n_sites + 2
    if spec.kernels is not None:
        ks = [_check_kernel(K, n) for K in spec.kernels]
        if len(ks) != spec.n_archetypes:
            raise SynthError(f"{len(ks)} kernels given for {spec.n_archetypes} archetypes")
        return ks
    if spec.kernel_kind == "cycle":
        return [cycle_kernel(spec.n_sites)] * spec.n_archetypes
    if spec.kernel_kind == "uniform":
        return [uniform_site_kernel(spec.n_sites)] * spec.n_archetypes
    return random_kernels(spec.n_archetypes, spec.n_sites, _rng(spec.seed, "kernels"))


def generate(spec: SynthSpec) -> SynthResult:
    spec.validate()
    kernels = build_kernels(spec)
    shared = _rng(spec.seed, "sites")
    site_uv = site_positions(spec.n_sites, shared)
    profiles = _site_profiles(spec.n_sites, shared)
    res = SynthResult(spec)
    for city in spec.cities:
        res.cities[city.name] = _generate_city(spec, city, kernels, site_uv, profiles)
    return res


def write_corpus(result: SynthResult, out):
    out = Path(out)
    for name, co in result.cities.items():
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        write_locations(d / "locations.csv", co.table)
        write_trajectories(d / "trajectories.tsv", co.trajectories)
        with open(d / "users.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user_id", "archetype", "home", "work"])
            w.writerows(co.users)
        with open(d / "sites.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["site", "location_id"])
            w.writerows(enumerate(co.site_cells))


# ---------------------------------------------------------------------------
# spec files
# ---------------------------------------------------------------------------

_SPEC_KEYS = {"seed", "n_archetypes", "n_sites", "kernel_kind", "cities"}
_CITY_KEYS = {"rows", "cols", "users", "days", "mixing", "center_lat", "center_lon",
              "stay_mean_h", "stay_shape"}


def spec_from_dict(raw: dict, seed: int | None = None) -> SynthSpec:
    unknown = set(raw) - _SPEC_KEYS
    if unknown:
        raise SynthError(f"unknown spec keys: {sorted(unknown)}")
    cities = []
    for name, c in raw.get("cities", {}).items():
        bad = set(c) - _CITY_KEYS
        if bad:
            raise SynthError(f"city {name}: unknown keys {sorted(bad)}")
        cities.append(CitySpec(name=name, **c))
    kw = {k: raw[k] for k in ("seed", "n_archetypes", "n_sites", "kernel_kind") if k in raw}
    if seed is not None:
        kw["seed"] = seed
    spec = SynthSpec(cities=cities, **kw)
    spec.validate()
    return spec


def load_spec(path, seed: int | None = None) -> SynthSpec:
    with open(path, "rb") as fh:
        try:
            raw = tomli.load(fh)
        except tomli.TOMLDecodeError as e:
            raise SynthError(f"{path}: {e}") from None
    return spec_from_dict(raw, seed)


def spec_to_dict(spec: SynthSpec) -> dict:
    out = {"seed": spec.seed, "n_archetypes": spec.n_archetypes, "n_sites": spec.n_sites,
           "kernel_kind": spec.kernel_kind, "cities": {}}
    for c in spec.cities:
        d = {k: getattr(c, k) for k in sorted(_CITY_KEYS) if getattr(c, k) is not None}
        out["cities"][c.name] = d
    return out


def default_spec(seed: int = 0) -> SynthSpec:
    return SynthSpec(seed=seed, cities=[
        CitySpec("lakeside", 8, 8, users=200, days=7, center_lat=29.65, center_lon=91.1),
        CitySpec("rivertown", 12, 16, users=600, days=7, center_lat=28.68, center_lon=115.86),
        CitySpec("harbor", 20, 20, users=1500, days=14, center_lat=31.23, center_lon=121.47),
    ])


def sharing_spec(sharing: float, seed: int = 0, users=(150, 150), days=7) -> SynthSpec:
    """Two cities whose archetype mixtures overlap by ``sharing`` in [0, 1].

    Archetypes 0/1 are private to the first/second city; archetype 2 is shared.
    """
    mix_a = [1 - sharing, 0.0, sharing]
    mix_b = [0.0, 1 - sharing, sharing]
    return SynthSpec(seed=seed, n_archetypes=3, cities=[
        CitySpec("east", 10, 10, users=users[0], days=days, mixing=mix_a),
        CitySpec("west", 12, 12, users=users[1], days=days, mixing=mix_b),
    ])


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------

@dataclass
class OracleResult:
    best_acc1: float  # unseen contexts predicted by the modal training location
    seen_acc1: float  # restricted to test transitions whose context was seen
    n_test: int
    n_unseen: int
    max_prob: dict  # context location -> max empirical next-location probability


def markov_oracle(corpus: MultiCityCorpus, city: str) -> OracleResult:
    """Best achievable Acc@1 of a first-order predictor fit on the training split.

    Plain counting over location ids: for each context the most frequent
    successor (smallest id on ties) is the prediction.
    """
    cd = corpus.cities[city]
    trans = defaultdict(Counter)
    freq = Counter()
    for tr in cd.train:
        locs = tr.locations
        freq.update(locs)
        for a, b in zip(locs, locs[1:]):
            trans[a][b] += 1
    best = {a: min(c, key=lambda l: (-c[l], l)) for a, c in trans.items()}
    modal = min(freq, key=lambda l: (-freq[l], l)) if freq else None
    max_prob = {a: max(c.values()) / sum(c.values()) for a, c in trans.items()}
    hits = seen_hits = n = unseen = 0
    for tr in cd.test:
        locs = tr.locations
        for a, b in zip(locs, locs[1:]):
            n += 1
            if a in best:
                hit = best[a] == b
                seen_hits += hit
            else:
                unseen += 1
                hit = modal == b
            hits += hit
    seen = n - unseen
    return OracleResult(hits / n if n else float("nan"),
                        seen_hits / seen if seen else float("nan"), n, unseen, max_prob)
