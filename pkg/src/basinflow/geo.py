"""Static reservoir graph construction from coordinates and elevations.

Directed edges run from a reservoir to the lower-elevation members of its
k-nearest candidate set; every node also carries a permanent self-loop. The
resulting structure is shared across all days of a window until pruning
diverges it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

EARTH_RADIUS_KM = 6371.0


class GraphError(Exception):
    pass


@dataclass(frozen=True)
class ReservoirMeta:
    id: str
    lat: float
    lon: float
    elevation_m: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise GraphError(f"latitude out of range for '{self.id}': {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise GraphError(f"longitude out of range for '{self.id}': {self.lon}")


def haversine(lat1, lon1, lat2, lon2):
    """Great-circle distance in kilometers."""
    for lat in (lat1, lat2):
        if not -90.0 <= lat <= 90.0:
            raise GraphError(f"latitude out of range: {lat}")
    for lon in (lon1, lon2):
        if not -180.0 <= lon <= 180.0:
            raise GraphError(f"longitude out of range: {lon}")
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dphi = math.radians(lat2 - lat1)
    dlam = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


@dataclass
class TemporalGraph:
    """Node set plus directed edges with a live prune mask.

    ``edges`` lists every directed pair including self-loops; ``prune_mask``
    aligns with it (True = active). Self-loops are never prunable.
    """

    node_ids: list[str]
    edges: list[tuple[int, int]]
    prune_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.prune_mask is None:
            self.prune_mask = np.ones(len(self.edges), dtype=bool)
        self.prune_mask = np.asarray(self.prune_mask, dtype=bool)
        if len(self.prune_mask) != len(self.edges):
            raise GraphError("prune mask length does not match edge list")

    @property
    def n_nodes(self):
        return len(self.node_ids)

    def adjacency(self):
        """N x N binary matrix over *active* edges."""
        a = np.zeros((self.n_nodes, self.n_nodes), dtype=np.float64)
        for (i, j), keep in zip(self.edges, self.prune_mask):
            if keep:
                a[i, j] = 1.0
        return a

    def non_self_edges(self):
        return [(i, j) for (i, j) in self.edges if i != j]

    def active_edges(self):
        return [e for e, keep in zip(self.edges, self.prune_mask) if keep]

    def active_non_self_count(self):
        return sum(1 for (i, j), keep in zip(self.edges, self.prune_mask) if keep and i != j)

    def copy(self):
        return TemporalGraph(list(self.node_ids), list(self.edges), self.prune_mask.copy())


def build_graph(metas: list[ReservoirMeta], k: int) -> TemporalGraph:
    """k-nearest candidates, elevation-gated downstream edges, self-loops.

    Candidate ties at equal distance break by ascending reservoir id so the
    result is deterministic.
    """
    if len(metas) < 1:
        raise GraphError("need at least one reservoir")
    if k < 0:
        raise GraphError(f"k must be >= 0, got {k}")
    ids = [m.id for m in metas]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise GraphError(f"duplicate reservoir ids: {dupes}")

    n = len(metas)
    edges = []
    for i in range(n):
        # k nearest by haversine, tie-broken by ascending id
        others = []
        for j in range(n):
            if j == i:
                continue
            d = haversine(metas[i].lat, metas[i].lon, metas[j].lat, metas[j].lon)
            others.append((d, metas[j].id, j))
        others.sort()
        candidates = [j for _, _, j in others[:k]]
        for j in sorted(candidates):
            if metas[j].elevation_m < metas[i].elevation_m:  # strict downstream gate
                edges.append((i, j))
    edges.extend((i, i) for i in range(n))
    edges.sort()
    return TemporalGraph(ids, edges)


def apply_prune_mask(graph: TemporalGraph, removed) -> TemporalGraph:
    """Return a new graph with ``removed`` edges masked out. Self-loops refuse."""
    removed = set(removed)
    edge_index = {e: idx for idx, e in enumerate(graph.edges)}
    for e in removed:
        if e not in edge_index:
            raise GraphError(f"edge {e} is not in the graph")
        if e[0] == e[1]:
            raise GraphError(f"self-loop {e} cannot be pruned")
    out = graph.copy()
    for e in removed:
        out.prune_mask[edge_index[e]] = False
    return out


# ---------------------------------------------------------------------------
# file I/O


def read_metadata(path) -> list[ReservoirMeta]:
    metas = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"id", "lat", "lon", "elevation_m"}
        if reader.fieldnames is None or not expected.issubset(reader.fieldnames):
            raise GraphError(f"metadata file {path} must have header id,lat,lon,elevation_m")
        for row in reader:
            metas.append(
                ReservoirMeta(
                    id=row["id"],
                    lat=float(row["lat"]),
                    lon=float(row["lon"]),
                    elevation_m=float(row["elevation_m"]),
                )
            )
    return metas


def write_metadata(metas, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "lat", "lon", "elevation_m"])
        for m in metas:
            writer.writerow([m.id, f"{m.lat:.6f}", f"{m.lon:.6f}", f"{m.elevation_m:.1f}"])


def write_edge_list(graph: TemporalGraph, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["src", "dst", "active"])
        for (i, j), keep in zip(graph.edges, graph.prune_mask):
            writer.writerow([graph.node_ids[i], graph.node_ids[j], int(keep)])
