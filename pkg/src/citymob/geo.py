"""Grid discretization and per-location features (POI vector, coordinates, popularity)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

N_POI = 14
POI_CATEGORIES = (
    "auto_service",
    "auto_dealers",
    "auto_repair",
    "motorcycle_service",
    "food_beverages",
    "shopping",
    "daily_life_service",
    "sports_recreation",
    "medical_service",
    "accommodation_service",
    "tourist_attraction",
    "commercial_house",
    "governmental_organization",
    "science_culture_education",
)
N_RANKS = 8

# Upper percentile bound (inclusive, in percent) of each rank bucket; rank 0 is
# the most popular. The table's values are used, not the prose description that
# starts counting at 1.
RANK_UPPER_PERCENT = (1, 5, 10, 20, 40, 60, 80, 100)

EARTH_RADIUS_M = 6371008.8
M_PER_DEG = math.pi * EARTH_RADIUS_M / 180.0


class OutOfBounds(ValueError):
    pass


@dataclass(frozen=True)
class CityGeometry:
    city_id: str
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    cell_size_m: float = 500.0

    def __post_init__(self):
        if not self.lat_min < self.lat_max:
            raise ValueError(f"lat_min {self.lat_min} must be < lat_max {self.lat_max}")
        if not self.lon_min < self.lon_max:
            raise ValueError(f"lon_min {self.lon_min} must be < lon_max {self.lon_max}")
        if self.cell_size_m <= 0:
            raise ValueError("cell_size_m must be positive")

    @classmethod
    def from_grid(cls, city_id, center_lat, center_lon, rows, cols, cell_size_m=500.0):
        """Bounding box holding exactly ``rows x cols`` cells around a center."""
        dlat = rows * cell_size_m / M_PER_DEG
        dlon = cols * cell_size_m / (M_PER_DEG * math.cos(math.radians(center_lat)))
        return cls(city_id, center_lat - dlat / 2, center_lat + dlat / 2,
                   center_lon - dlon / 2, center_lon + dlon / 2, cell_size_m)

    @property
    def _m_per_deg_lon(self):
        return M_PER_DEG * math.cos(math.radians(0.5 * (self.lat_min + self.lat_max)))

    @property
    def height_m(self):
        return (self.lat_max - self.lat_min) * M_PER_DEG

    @property
    def width_m(self):
        return (self.lon_max - self.lon_min) * self._m_per_deg_lon

    @property
    def n_rows(self):
        return max(1, math.ceil(self.height_m / self.cell_size_m - 1e-9))

    @property
    def n_cols(self):
        return max(1, math.ceil(self.width_m / self.cell_size_m - 1e-9))

    @property
    def n_cells(self):
        return self.n_rows * self.n_cols

    def to_metric(self, lat, lon):
        """Equirectangular offsets (north, east) in metres from the SW corner."""
        return (lat - self.lat_min) * M_PER_DEG, (lon - self.lon_min) * self._m_per_deg_lon

    def cell_center(self, location_id: int):
        """Centroid of the cell, clipped to the bbox (edge cells may be partial)."""
        if not 0 <= location_id < self.n_cells:
            raise OutOfBounds(f"location {location_id} not in grid of {self.n_cells} cells")
        row, col = divmod(location_id, self.n_cols)
        c = self.cell_size_m
        north = 0.5 * (row * c + min((row + 1) * c, self.height_m))
        east = 0.5 * (col * c + min((col + 1) * c, self.width_m))
        return self.lat_min + north / M_PER_DEG, self.lon_min + east / self._m_per_deg_lon


def grid_index(city: CityGeometry, lat: float, lon: float) -> int:
    """Row-major cell id of a point; points on the north/east edge fall in the last cell."""
    if not (city.lat_min <= lat <= city.lat_max and city.lon_min <= lon <= city.lon_max):
        raise OutOfBounds(f"({lat}, {lon}) outside bbox of city {city.city_id!r}")
    north, east = city.to_metric(lat, lon)
    row = min(int(north // city.cell_size_m), city.n_rows - 1)
    col = min(int(east // city.cell_size_m), city.n_cols - 1)
    return row * city.n_cols + col


def poi_vector(counts) -> np.ndarray:
    """``[n_1..n_c, p_1..p_c]`` with p_i the category share (all zero when no POIs)."""
    n = np.asarray(counts, dtype=np.float64)
    if n.shape != (N_POI,):
        raise ValueError(f"expected {N_POI} POI counts, got shape {n.shape}")
    if np.any(n < 0):
        raise ValueError("POI counts must be non-negative")
    total = n.sum()
    frac = n / total if total > 0 else np.zeros(N_POI)
    return np.concatenate([n, frac])


def rank_bucket(position: int, total: int) -> int:
    """Bucket for 1-based ``position`` of ``total``, intervals open left / closed right."""
    for r, upper in enumerate(RANK_UPPER_PERCENT):
        if position * 100 <= upper * total:
            return r
    return N_RANKS - 1


def popularity_rank(visit_counts, location_ids=None) -> np.ndarray:
    """Popularity rank R per location (input order preserved).

    Locations are sorted by visits descending, ties by ascending location id;
    the i-th (1-based) gets percentile i / total.
    """
    visits = np.asarray(visit_counts)
    if visits.size == 0:
        raise ValueError("popularity_rank needs at least one location")
    ids = np.arange(visits.size) if location_ids is None else np.asarray(location_ids)
    order = np.lexsort((ids, -visits))
    ranks = np.empty(visits.size, dtype=np.int64)
    total = visits.size
    for pos, i in enumerate(order, start=1):
        ranks[i] = rank_bucket(pos, total)
    return ranks


def normalize_coords(coords) -> np.ndarray:
    """Zero mean, unit (population) std per axis; constant axes map to 0."""
    g = np.asarray(coords, dtype=np.float64)
    mu = g.mean(axis=0)
    sd = g.std(axis=0)
    out = np.zeros_like(g)
    ok = sd > 1e-12
    out[:, ok] = (g[:, ok] - mu[ok]) / sd[ok]
    return out


@dataclass
class LocationTable:
    """One city's locations, sorted by id, with derived model features."""

    city_id: str
    location_ids: np.ndarray  # (N,) int
    lat: np.ndarray
    lon: np.ndarray
    poi_counts: np.ndarray  # (N, 14) int
    visits: np.ndarray  # (N,) int

    def __post_init__(self):
        order = np.argsort(self.location_ids, kind="stable")
        for name in ("location_ids", "lat", "lon", "poi_counts", "visits"):
            setattr(self, name, np.asarray(getattr(self, name))[order])
        if len(np.unique(self.location_ids)) != len(self.location_ids):
            raise ValueError(f"duplicate location ids in city {self.city_id!r}")
        if len(self.location_ids) == 0:
            raise ValueError(f"city {self.city_id!r} has no locations")
        self.index_of = {int(l): i for i, l in enumerate(self.location_ids)}
        self.poi = np.stack([poi_vector(c) for c in self.poi_counts])
        self.geo = normalize_coords(np.column_stack([self.lat, self.lon]))
        self.rank = popularity_rank(self.visits, self.location_ids)

    def __len__(self):
        return len(self.location_ids)


LOCATION_HEADER = ["location_id", "lat", "lon"] + [f"poi_{i}" for i in range(N_POI)] + ["visits"]


def write_locations(path, table: LocationTable):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOCATION_HEADER)
        for i in range(len(table)):
            w.writerow([int(table.location_ids[i]), repr(float(table.lat[i])),
                        repr(float(table.lon[i]))]
                       + [int(c) for c in table.poi_counts[i]] + [int(table.visits[i])])


def read_locations(path, city_id=None) -> LocationTable:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LOCATION_HEADER:
            raise ValueError(f"{path}: bad header {header!r}")
        rows = [r for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no locations")
    ids = np.array([int(r[0]) for r in rows])
    lat = np.array([float(r[1]) for r in rows])
    lon = np.array([float(r[2]) for r in rows])
    poi = np.array([[int(x) for x in r[3:3 + N_POI]] for r in rows])
    visits = np.array([int(r[3 + N_POI]) for r in rows])
    if np.any(poi < 0):
        raise ValueError(f"{path}: negative POI count")
    return LocationTable(city_id or path.parent.name, ids, lat, lon, poi, visits)
