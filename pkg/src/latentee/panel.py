"""Surveillance panels, populations and spatial structure.

All CSV files are UTF-8, comma separated, with a mandatory header row:

``panel.csv``
    ``t,region,age,count[,week_of_year]`` -- one row per (week, region, age).
``population.csv``
    ``region,age,pop`` -- row order fixes the region and age label order.
``adjacency.csv``
    ``region_a,region_b`` -- undirected edge list.
``tracts.csv``
    ``puma,lat,lon,pop`` -- census-tract centroids and populations.

A commuting-flow distance matrix could replace :func:`build_distance_matrix`
output; any symmetric positive G x G matrix written with
:func:`save_matrix_csv` is accepted wherever a distance matrix is expected.
"""

from __future__ import annotations

import csv
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EARTH_RADIUS_KM = 6371.0088


class PanelError(ValueError):
    """Base class for panel ingestion and validation failures."""


class PanelParseError(PanelError):
    pass


class PanelShapeError(PanelError):
    pass


class PanelValidationError(PanelError):
    pass


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def default_weeks(T: int, start_week: int = 1) -> np.ndarray:
    """Week-of-year labels for T consecutive weeks, wrapping after 52."""
    return (np.arange(T) + start_week - 1) % 52 + 1


@dataclass(frozen=True)
class PanelData:
    """Incidence counts ``counts[t, g, i]`` with populations ``populations[g, i]``."""

    counts: np.ndarray
    populations: np.ndarray
    week_of_year: np.ndarray
    regions: tuple = ()
    ages: tuple = ()

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 3:
            raise PanelShapeError(f"counts must be 3-d (T, G, I), got shape {counts.shape}")
        if not np.issubdtype(counts.dtype, np.integer):
            if not np.all(np.isfinite(counts)) or np.any(counts != np.round(counts)):
                raise PanelValidationError("counts must be integers")
        T, G, I = counts.shape
        pops = np.asarray(self.populations)
        if pops.shape != (G, I):
            raise PanelShapeError(f"populations shape {pops.shape} does not match (G, I) = {(G, I)}")
        weeks = np.asarray(self.week_of_year)
        if weeks.shape != (T,):
            raise PanelShapeError(f"week_of_year must have length T={T}, got {weeks.shape}")
        if np.any(counts < 0):
            t, g, i = np.argwhere(counts < 0)[0]
            raise PanelValidationError(f"negative count at (t={t + 1}, g={g + 1}, i={i + 1})")
        if np.any(pops < 1):
            raise PanelValidationError("all populations must be >= 1")
        if np.any((weeks < 1) | (weeks > 52)):
            raise PanelValidationError("week_of_year values must lie in 1..52")
        regions = tuple(self.regions) or tuple(f"r{g + 1}" for g in range(G))
        ages = tuple(self.ages) or tuple(f"a{i + 1}" for i in range(I))
        if len(regions) != G or len(ages) != I:
            raise PanelShapeError("label counts do not match panel dimensions")
        object.__setattr__(self, "counts", _frozen(counts, np.int64))
        object.__setattr__(self, "populations", _frozen(pops, np.int64))
        object.__setattr__(self, "week_of_year", _frozen(weeks, np.int64))
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "ages", ages)

    @property
    def T(self) -> int:
        return self.counts.shape[0]

    @property
    def G(self) -> int:
        return self.counts.shape[1]

    @property
    def I(self) -> int:  # noqa: E743
        return self.counts.shape[2]

    def window(self, start: int, stop: int) -> "PanelData":
        """Sub-panel of weeks ``start..stop-1`` (0-based, half open)."""
        return PanelData(self.counts[start:stop], self.populations,
                         self.week_of_year[start:stop], self.regions, self.ages)


@dataclass(frozen=True)
class SpatialStructure:
    adjacency_order: np.ndarray
    distance: np.ndarray | None = None

    def __post_init__(self):
        o = np.asarray(self.adjacency_order)
        if o.ndim != 2 or o.shape[0] != o.shape[1]:
            raise PanelShapeError("adjacency_order must be square")
        if np.any(o < 0) or np.any(np.diag(o) != 0) or not np.array_equal(o, o.T):
            raise PanelValidationError("adjacency_order must be symmetric, nonnegative, zero diagonal")
        # triangle consistency: o[a,c] <= o[a,b] + o[b,c]
        if np.any(o[:, None, :] > o[:, :, None] + o[None, :, :]):
            raise PanelValidationError("adjacency_order violates the triangle inequality")
        object.__setattr__(self, "adjacency_order", _frozen(o, np.int64))
        if self.distance is not None:
            d = np.asarray(self.distance, dtype=float)
            if d.shape != o.shape:
                raise PanelShapeError("distance shape does not match adjacency_order")
            check_distance_matrix(d)
            object.__setattr__(self, "distance", _frozen(d, float))


def check_distance_matrix(d: np.ndarray) -> None:
    off = ~np.eye(d.shape[0], dtype=bool)
    if not np.allclose(d, d.T, rtol=1e-12, atol=0):
        raise PanelValidationError("distance matrix must be symmetric")
    if np.any(d[off] <= 0) or np.any(np.diag(d) < 0):
        raise PanelValidationError("distance must be positive off the diagonal and nonnegative on it")


@dataclass(frozen=True)
class TractTable:
    puma: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    pop: np.ndarray
    puma_labels: tuple = field(default=())

    def __post_init__(self):
        n = len(self.puma)
        for name in ("lat", "lon", "pop"):
            if len(getattr(self, name)) != n:
                raise PanelShapeError(f"tract column {name!r} has the wrong length")
        pop = np.asarray(self.pop, dtype=float)
        if np.any(pop < 0):
            raise PanelValidationError("tract populations must be >= 0")
        labels = tuple(self.puma_labels) or tuple(dict.fromkeys(self.puma))
        object.__setattr__(self, "puma_labels", labels)
        object.__setattr__(self, "pop", _frozen(pop, float))
        object.__setattr__(self, "lat", _frozen(self.lat, float))
        object.__setattr__(self, "lon", _frozen(self.lon, float))
        object.__setattr__(self, "puma", np.asarray(self.puma))


# ---------------------------------------------------------------------------
# CSV I/O

def _read_rows(path, required):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise PanelParseError(f"{path}: empty file") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise PanelParseError(f"{path}:1: header lacks column(s) {missing}")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise PanelParseError(
                    f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}")
            yield reader.line_num, dict(zip(header, (c.strip() for c in row)))


def _as_int(value, path, line, name):
    try:
        return int(value)
    except ValueError:
        raise PanelParseError(f"{path}:{line}: {name}={value!r} is not an integer") from None


def _as_float(value, path, line, name):
    try:
        return float(value)
    except ValueError:
        raise PanelParseError(f"{path}:{line}: {name}={value!r} is not a number") from None


def load_populations(path) -> tuple[np.ndarray, tuple, tuple]:
    entries = {}
    regions, ages = {}, {}
    for line, row in _read_rows(path, ("region", "age", "pop")):
        regions.setdefault(row["region"], len(regions))
        ages.setdefault(row["age"], len(ages))
        entries[(row["region"], row["age"])] = _as_int(row["pop"], path, line, "pop")
    pops = np.zeros((len(regions), len(ages)), dtype=np.int64)
    for (r, a), v in entries.items():
        pops[regions[r], ages[a]] = v
    for r, g in regions.items():
        for a, i in ages.items():
            if (r, a) not in entries:
                raise PanelShapeError(f"{path}: missing population for region={r!r}, age={a!r}")
    return pops, tuple(regions), tuple(ages)


def load_panel(panel_path, population_path=None) -> PanelData:
    """Read a long-format panel and its population table.

    ``population_path`` defaults to ``population.csv`` next to the panel file.
    Every (t, region, age) cell for t = 1..T must be present exactly once.
    """
    panel_path = Path(panel_path)
    if population_path is None:
        population_path = panel_path.with_name("population.csv")
    pops, regions, ages = load_populations(population_path)
    r_index = {r: g for g, r in enumerate(regions)}
    a_index = {a: i for i, a in enumerate(ages)}

    cells = {}
    weeks = {}
    for line, row in _read_rows(panel_path, ("t", "region", "age", "count")):
        t = _as_int(row["t"], panel_path, line, "t")
        count = _as_int(row["count"], panel_path, line, "count")
        if t < 1:
            raise PanelParseError(f"{panel_path}:{line}: t must be >= 1")
        if row["region"] not in r_index:
            raise PanelParseError(f"{panel_path}:{line}: unknown region {row['region']!r}")
        if row["age"] not in a_index:
            raise PanelParseError(f"{panel_path}:{line}: unknown age {row['age']!r}")
        if count < 0:
            raise PanelValidationError(f"{panel_path}:{line}: negative count {count}")
        key = (t, r_index[row["region"]], a_index[row["age"]])
        if key in cells:
            raise PanelParseError(f"{panel_path}:{line}: duplicate cell (t={t}, "
                                  f"region={row['region']}, age={row['age']})")
        cells[key] = count
        if row.get("week_of_year"):
            w = _as_int(row["week_of_year"], panel_path, line, "week_of_year")
            if weeks.setdefault(t, w) != w:
                raise PanelParseError(f"{panel_path}:{line}: conflicting week_of_year for t={t}")

    if not cells:
        raise PanelShapeError(f"{panel_path}: no data rows")
    T = max(k[0] for k in cells)
    G, I = pops.shape
    counts = np.zeros((T, G, I), dtype=np.int64)
    for t in range(1, T + 1):
        for g in range(G):
            for i in range(I):
                try:
                    counts[t - 1, g, i] = cells[(t, g, i)]
                except KeyError:
                    raise PanelShapeError(
                        f"{panel_path}: missing cell (t={t}, g={g + 1}, i={i + 1}) "
                        f"[region={regions[g]!r}, age={ages[i]!r}]") from None
    if weeks:
        if len(weeks) != T:
            raise PanelShapeError(f"{panel_path}: week_of_year given for some weeks only")
        week_of_year = np.array([weeks[t] for t in range(1, T + 1)])
    else:
        week_of_year = default_weeks(T)
    return PanelData(counts, pops, week_of_year, regions, ages)


def _atomic_write(path: Path, write):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        write(fh)
    os.replace(tmp, path)


def write_csv(path, header, rows) -> None:
    """Write rows atomically (temporary file then rename)."""
    def _write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    _atomic_write(path, _write)


def save_panel(panel: PanelData, directory) -> tuple[Path, Path]:
    directory = Path(directory)
    panel_path = directory / "panel.csv"
    pop_path = directory / "population.csv"
    rows = ((t + 1, panel.regions[g], panel.ages[i], int(panel.counts[t, g, i]),
             int(panel.week_of_year[t]))
            for t in range(panel.T) for g in range(panel.G) for i in range(panel.I))
    write_csv(panel_path, ("t", "region", "age", "count", "week_of_year"), rows)
    write_csv(pop_path, ("region", "age", "pop"),
              ((panel.regions[g], panel.ages[i], int(panel.populations[g, i]))
               for g in range(panel.G) for i in range(panel.I)))
    return panel_path, pop_path


def load_adjacency(path, regions) -> np.ndarray:
    index = {r: g for g, r in enumerate(regions)}
    adj = np.zeros((len(regions), len(regions)), dtype=bool)
    for line, row in _read_rows(path, ("region_a", "region_b")):
        try:
            a, b = index[row["region_a"]], index[row["region_b"]]
        except KeyError as exc:
            raise PanelParseError(f"{path}:{line}: unknown region {exc.args[0]!r}") from None
        if a == b:
            raise PanelParseError(f"{path}:{line}: self loop on {row['region_a']!r}")
        adj[a, b] = adj[b, a] = True
    return adj


def save_adjacency(adj, regions, path) -> None:
    G = len(regions)
    write_csv(path, ("region_a", "region_b"),
              ((regions[a], regions[b]) for a in range(G) for b in range(a + 1, G) if adj[a, b]))


def load_tracts(path) -> TractTable:
    puma, lat, lon, pop = [], [], [], []
    for line, row in _read_rows(path, ("puma", "lat", "lon", "pop")):
        puma.append(row["puma"])
        lat.append(_as_float(row["lat"], path, line, "lat"))
        lon.append(_as_float(row["lon"], path, line, "lon"))
        pop.append(_as_float(row["pop"], path, line, "pop"))
    return TractTable(np.array(puma), np.array(lat), np.array(lon), np.array(pop))


def load_matrix_csv(path) -> tuple[np.ndarray, tuple]:
    """Dense square matrix with a header row of labels."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        labels = tuple(h.strip() for h in next(reader))
        rows = []
        for row in reader:
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise PanelParseError(f"{path}:{reader.line_num}: non-numeric entry") from None
    m = np.array(rows)
    if m.shape != (len(labels), len(labels)):
        raise PanelShapeError(f"{path}: expected a {len(labels)}x{len(labels)} matrix, got {m.shape}")
    return m, labels


def save_matrix_csv(m, labels, path) -> None:
    write_csv(path, labels, ([repr(float(v)) for v in row] for row in np.asarray(m)))


# ---------------------------------------------------------------------------
# Spatial structure

def adjacency_orders(adjacency) -> np.ndarray:
    """Hop-count distance between every pair of regions (breadth-first search)."""
    adj = np.asarray(adjacency, dtype=bool)
    G = adj.shape[0]
    if adj.shape != (G, G):
        raise PanelShapeError("adjacency must be square")
    if np.any(np.diag(adj)):
        raise PanelValidationError("adjacency diagonal must be False")
    if not np.array_equal(adj, adj.T):
        raise PanelValidationError("adjacency must be symmetric")
    neighbours = [np.flatnonzero(adj[g]) for g in range(G)]
    orders = np.full((G, G), -1, dtype=np.int64)
    for src in range(G):
        orders[src, src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in neighbours[u]:
                if orders[src, v] < 0:
                    orders[src, v] = orders[src, u] + 1
                    queue.append(v)
        unreachable = np.flatnonzero(orders[src] < 0)
        if unreachable.size:
            raise PanelValidationError(
                f"adjacency graph is disconnected: region {src + 1} cannot reach region "
                f"{unreachable[0] + 1}")
    return orders


def haversine_km(lat1, lon1, lat2, lon2):
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    a = (np.sin((lat2 - lat1) / 2) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2)
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def build_distance_matrix(tracts: TractTable) -> np.ndarray:
    """Population-weighted mean tract-to-tract distance between PUMAs, in tens of km.

    The diagonal is the mean distance between two residents of the same PUMA.
    """
    labels = tracts.puma_labels
    index = {p: g for g, p in enumerate(labels)}
    member = np.array([index[p] for p in tracts.puma])
    G = len(labels)
    totals = np.bincount(member, weights=tracts.pop, minlength=G)
    if np.any(totals <= 0):
        bad = labels[int(np.flatnonzero(totals <= 0)[0])]
        raise PanelValidationError(f"puma {bad!r} has zero total population")
    weights = np.zeros((len(member), G))
    weights[np.arange(len(member)), member] = tracts.pop / totals[member]
    d = haversine_km(tracts.lat[:, None], tracts.lon[:, None],
                     tracts.lat[None, :], tracts.lon[None, :])
    D = weights.T @ d @ weights / 10.0
    return 0.5 * (D + D.T)
