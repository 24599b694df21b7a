"""Trajectories, temporal discretization, windowing, padding, splits and batch schedules."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geo import LocationTable, N_POI, read_locations, write_locations

N_SLOTS = 48
SLOT_SECONDS = 1800
DAY_SECONDS = 86400

# Token channel values: padding 0 and termination 1 keep their conventional
# codes; real stays get 2.
TOKEN_PAD = 0
TOKEN_EOS = 1
TOKEN_REAL = 2
IGNORE = -1

SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


def time_slot(seconds_of_day) -> int:
    """Nearest half-hour boundary, half-way rounding up, 24:00 wrapping to 0."""
    if not 0 <= seconds_of_day < DAY_SECONDS:
        raise DataError(f"timestamp {seconds_of_day} outside [0, 86400)")
    return int(np.floor(seconds_of_day / SLOT_SECONDS + 0.5)) % N_SLOTS


def discretize(day: int, seconds_of_day: float):
    """(day, slot) for a stay start; rounding past midnight moves to the next day."""
    raw = int(np.floor(seconds_of_day / SLOT_SECONDS + 0.5))
    slot = time_slot(seconds_of_day)
    return (day + 1, slot) if raw >= N_SLOTS else (day, slot)


@dataclass
class Trajectory:
    user_id: str
    city_id: str
    points: list  # (location_id, slot, day)

    def __len__(self):
        return len(self.points)

    @property
    def locations(self):
        return [p[0] for p in self.points]

    def validate(self, table: LocationTable | None = None, min_points: int = 0):
        keys = [(d, s) for _, s, d in self.points]
        if any(b < a for a, b in zip(keys, keys[1:])):
            raise DataError(f"trajectory of {self.user_id} is not chronological")
        for loc, s, _ in self.points:
            if not 0 <= s < N_SLOTS:
                raise DataError(f"slot {s} out of range")
            if table is not None and loc not in table.index_of:
                raise DataError(f"location {loc} not in city {table.city_id!r}")
        if len(self.points) < min_points:
            raise DataError(f"trajectory of {self.user_id} has {len(self)} < {min_points} points")


def window_split(traj: Trajectory, window_days: int = 3, min_points: int = 5,
                 n_days: int | None = None) -> list:
    """Sliding windows advancing one day at a time.

    Window starts run over ``0..n_days-window_days`` when the observation period
    is known, otherwise over the trajectory's own day span (at least one window).
    Windows with fewer than ``min_points`` stays are dropped.
    """
    if not traj.points:
        return []
    days = [p[2] for p in traj.points]
    if n_days is not None:
        starts = range(0, max(n_days - window_days, 0) + 1)
    else:
        first, last = min(days), max(days)
        starts = range(first, max(last - window_days + 1, first) + 1)
    out = []
    for s in starts:
        pts = [p for p in traj.points if s <= p[2] < s + window_days]
        if len(pts) >= min_points:
            out.append(Trajectory(traj.user_id, traj.city_id, pts))
    return out


@dataclass
class PaddedBatch:
    city_id: str
    poi: np.ndarray  # (B, T, 28)
    geo: np.ndarray  # (B, T, 2)
    rank: np.ndarray  # (B, T) int
    slot: np.ndarray  # (B, T) int
    loc_index: np.ndarray  # (B, T) row index into the city table, IGNORE off REAL
    targets: np.ndarray  # (B, T) next-location row index, IGNORE when unsupervised
    mask: np.ndarray  # (B, T) bool, REAL positions
    token: np.ndarray  # (B, T) TOKEN_*

    @property
    def n_supervised(self):
        return int((self.targets != IGNORE).sum())


def pad_batch(trajs, table: LocationTable, T: int) -> PaddedBatch:
    if not trajs:
        raise DataError("pad_batch needs at least one trajectory")
    cities = {t.city_id for t in trajs}
    if len(cities) != 1:
        raise DataError(f"batch mixes cities {sorted(cities)}")
    B = len(trajs)
    poi = np.zeros((B, T, 2 * N_POI))
    geo = np.zeros((B, T, 2))
    rank = np.zeros((B, T), dtype=np.int64)
    slot = np.zeros((B, T), dtype=np.int64)
    loc = np.full((B, T), IGNORE, dtype=np.int64)
    tgt = np.full((B, T), IGNORE, dtype=np.int64)
    tok = np.full((B, T), TOKEN_PAD, dtype=np.int64)
    for b, tr in enumerate(trajs):
        n = len(tr)
        if n > T - 1:
            raise DataError(
                f"trajectory of {tr.user_id} has {n} points but capacity {T} leaves room "
                f"for {T - 1}; truncate upstream (max_seq_len)")
        if n == 0:
            raise DataError("empty trajectory in batch")
        idx = np.array([table.index_of[p[0]] for p in tr.points])
        loc[b, :n] = idx
        slot[b, :n] = [p[1] for p in tr.points]
        poi[b, :n] = table.poi[idx]
        geo[b, :n] = table.geo[idx]
        rank[b, :n] = table.rank[idx]
        tgt[b, :n - 1] = idx[1:]
        tok[b, :n] = TOKEN_REAL
        tok[b, n] = TOKEN_EOS
    return PaddedBatch(trajs[0].city_id, poi, geo, rank, slot, loc, tgt, tok == TOKEN_REAL, tok)


def unpad(batch: PaddedBatch, table: LocationTable):
    """Recover per-sequence (location_id, slot) lists from a batch."""
    out = []
    for b in range(batch.mask.shape[0]):
        n = int(batch.mask[b].sum())
        out.append([(int(table.location_ids[batch.loc_index[b, t]]), int(batch.slot[b, t]))
                    for t in range(n)])
    return out


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def format_trajectory(traj: Trajectory) -> str:
    return traj.user_id + "\t" + ",".join(f"{d}:{s}:{l}" for l, s, d in traj.points)


def parse_trajectory_line(line: str, city_id: str) -> Trajectory:
    try:
        user, body = line.rstrip("\n").split("\t")
        pts = []
        for tok in body.split(","):
            d, s, l = tok.split(":")
            pts.append((int(l), int(s), int(d)))
    except ValueError:
        raise DataError(f"malformed trajectory line: {line[:60]!r}") from None
    return Trajectory(user, city_id, pts)


def write_trajectories(path, trajs):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in trajs:
            fh.write(format_trajectory(t) + "\n")


def read_trajectories(path, city_id: str) -> list:
    with open(path, encoding="utf-8") as fh:
        return [parse_trajectory_line(line, city_id) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

@dataclass
class CityData:
    table: LocationTable
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def split(self, name):
        return getattr(self, name)


@dataclass
class MultiCityCorpus:
    cities: dict  # city_id -> CityData

    @property
    def city_ids(self):
        return list(self.cities)

    def subset(self, city_ids) -> "MultiCityCorpus":
        return MultiCityCorpus({c: self.cities[c] for c in city_ids})


def _stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def split_users(user_ids, seed: int, ratios=(6, 2, 2)) -> dict:
    """Map user -> split name, partitioning users (not trajectories) by ``ratios``."""
    users = sorted(set(user_ids))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(users))
    total = sum(ratios)
    n_train = round(len(users) * ratios[0] / total)
    n_val = round(len(users) * ratios[1] / total)
    out = {}
    for rank, i in enumerate(perm):
        out[users[i]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return out


def preprocess_city(table: LocationTable, raw, window_days=3, min_points=5,
                    max_seq_len=48, split_seed=0, n_days=None) -> CityData:
    """Split users 6:2:2, window each trajectory, truncate to ``max_seq_len - 1`` stays."""
    assignment = split_users([t.user_id for t in raw],
                             split_seed + _stable_hash(table.city_id))
    data = CityData(table)
    for tr in raw:
        tr.validate(table)
        for w in window_split(tr, window_days, min_points, n_days):
            if len(w) > max_seq_len - 1:
                w = Trajectory(w.user_id, w.city_id, w.points[: max_seq_len - 1])
            data.split(assignment[tr.user_id]).append(w)
    return data


def city_dirs(root) -> list:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"corpus directory {root} does not exist")
    dirs = sorted(p for p in root.iterdir() if (p / "locations.csv").exists())
    if not dirs:
        raise DataError(f"no city directories with locations.csv under {root}")
    return dirs


def load_corpus(root, window_days=3, min_points=5, max_seq_len=48, split_seed=0,
                cities=None) -> MultiCityCorpus:
    """Load a corpus directory.

    Each city lives in ``<root>/<city>/`` with ``locations.csv`` and either
    preprocessed ``train.tsv``/``val.tsv``/``test.tsv`` or a raw
    ``trajectories.tsv`` that is preprocessed on the fly.
    """
    out = {}
    for d in city_dirs(root):
        cid = d.name
        if cities is not None and cid not in cities:
            continue
        table = read_locations(d / "locations.csv", cid)
        if all((d / f"{s}.tsv").exists() for s in SPLITS):
            cd = CityData(table, *(read_trajectories(d / f"{s}.tsv", cid) for s in SPLITS))
            for s in SPLITS:
                for tr in cd.split(s):
                    tr.validate(table)
        elif (d / "trajectories.tsv").exists():
            raw = read_trajectories(d / "trajectories.tsv", cid)
            cd = preprocess_city(table, raw, window_days, min_points, max_seq_len, split_seed)
        else:
            raise DataError(f"{d}: neither split files nor trajectories.tsv present")
        out[cid] = cd
    if cities is not None:
        missing = set(cities) - set(out)
        if missing:
            raise DataError(f"cities not found in corpus: {sorted(missing)}")
    return MultiCityCorpus(out)


def write_splits(corpus: MultiCityCorpus, root):
    root = Path(root)
    for cid, cd in corpus.cities.items():
        d = root / cid
        d.mkdir(parents=True, exist_ok=True)
        write_locations(d / "locations.csv", cd.table)
        for s in SPLITS:
            write_trajectories(d / f"{s}.tsv", cd.split(s))


def batches_for(trajs, batch_size: int) -> list:
    return [list(range(i, min(i + batch_size, len(trajs))))
            for i in range(0, len(trajs), batch_size)]


def sample_schedule(corpus: MultiCityCorpus, batch_size: int, seed: int,
                    split: str = "train") -> list:
    """One epoch of city-homogeneous batches in seeded random order.

    Trajectories are shuffled within each city, chunked into batches, and the
    batches of all cities interleaved by one global shuffle, so a city's share
    of the epoch equals its share of batches.
    """
    if not corpus.cities:
        raise DataError("empty corpus")
    rng = np.random.default_rng(seed)
    sched = []
    for cid in corpus.city_ids:
        n = len(corpus.cities[cid].split(split))
        perm = rng.permutation(n)
        for chunk in batches_for(range(n), batch_size):
            sched.append((cid, [int(perm[i]) for i in chunk]))
    order = rng.permutation(len(sched))
    return [sched[i] for i in order]
