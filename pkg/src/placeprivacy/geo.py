"""Coordinates, local metric projection and a read-only spatial index.

All distances downstream are planar distances in a local equirectangular
frame anchored at a city centroid. At city scale the error is well below a
meter, which is far smaller than any obfuscation radius we sweep.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

EARTH_RADIUS_M = 6371008.8
MAX_PROJECTION_DISTANCE_M = 100_000.0


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and -90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude out of range: {self.lat}")
        if not (math.isfinite(self.lon) and -180.0 <= self.lon <= 180.0):
            raise ValueError(f"longitude out of range: {self.lon}")


@dataclass(frozen=True)
class LocalPoint:
    x: float
    y: float

    def distance(self, other: "LocalPoint") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


def project(anchor: GeoPoint, p: GeoPoint) -> LocalPoint:
    """Equirectangular projection of `p` into meters east/north of `anchor`."""
    x, y = project_arrays(anchor, np.array([p.lat]), np.array([p.lon]))
    out = LocalPoint(float(x[0]), float(y[0]))
    if math.hypot(out.x, out.y) > MAX_PROJECTION_DISTANCE_M:
        raise ValueError(f"{p} is more than 100 km from anchor {anchor}")
    return out


def unproject(anchor: GeoPoint, q: LocalPoint) -> GeoPoint:
    lat, lon = unproject_arrays(anchor, np.array([q.x]), np.array([q.y]))
    return GeoPoint(float(lat[0]), float(lon[0]))


def project_arrays(anchor: GeoPoint, lat, lon) -> tuple[np.ndarray, np.ndarray]:
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if np.any(np.abs(lat) > 90) or np.any(np.abs(lon) > 180):
        raise ValueError("latitude/longitude out of range")
    dlon = np.radians(lon - anchor.lon)
    # wrap across the antimeridian
    dlon = (dlon + np.pi) % (2 * np.pi) - np.pi
    x = EARTH_RADIUS_M * dlon * math.cos(math.radians(anchor.lat))
    y = EARTH_RADIUS_M * np.radians(lat - anchor.lat)
    return x, y


def unproject_arrays(anchor: GeoPoint, x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    lat = anchor.lat + np.degrees(y / EARTH_RADIUS_M)
    lon = anchor.lon + np.degrees(x / (EARTH_RADIUS_M * math.cos(math.radians(anchor.lat))))
    lon = (lon + 180.0) % 360.0 - 180.0
    return lat, lon


def centroid(lat, lon) -> GeoPoint:
    """Anchor for a city: mean latitude / longitude of its points."""
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if lat.size == 0:
        raise ValueError("cannot compute the centroid of an empty point set")
    return GeoPoint(float(lat.mean()), float(lon.mean()))


class SpatialIndex:
    """Immutable k-NN / radius index over 2-D local points.

    Points are stored sorted by payload id so that the internal position
    order doubles as the tie-break order. Queries return ``(id, distance)``
    pairs sorted by distance, then by id.
    """

    def __init__(self, ids: Sequence[Hashable], xy: np.ndarray):
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        if len(ids) != len(xy):
            raise ValueError("ids and coordinates differ in length")
        if len(ids) == 0:
            raise ValueError("cannot build a spatial index over an empty point set")
        if not np.all(np.isfinite(xy)):
            raise ValueError("non-finite coordinates")
        order = sorted(range(len(ids)), key=lambda i: ids[i])
        self._ids = [ids[i] for i in order]
        self._xy = xy[order].copy()
        self._xy.setflags(write=False)
        self._tree = cKDTree(self._xy)

    def __len__(self):
        return len(self._ids)

    @property
    def ids(self) -> list:
        return list(self._ids)

    @property
    def xy(self) -> np.ndarray:
        return self._xy

    def id_at(self, pos: int):
        return self._ids[pos]

    def _dist(self, q: np.ndarray, pos: np.ndarray) -> np.ndarray:
        d = self._xy[pos] - q
        return np.hypot(d[..., 0], d[..., 1])

    def knn(self, q: LocalPoint, k: int) -> list[tuple[object, float]]:
        pos, dist = self.knn_positions(np.array([[q.x, q.y]]), k)
        return [(self._ids[p], float(d)) for p, d in zip(pos[0], dist[0])]

    def radius_query(self, q: LocalPoint, r: float) -> list[tuple[object, float]]:
        if not r > 0:
            raise ValueError(f"radius must be positive, got {r}")
        qa = np.array([q.x, q.y])
        pos = self._radius_positions(qa, r)
        dist = self._dist(qa, pos)
        order = np.lexsort((pos, dist))
        return [(self._ids[pos[i]], float(dist[i])) for i in order]

    def _radius_positions(self, q: np.ndarray, r: float) -> np.ndarray:
        # widen the tree query slightly, then apply the exact inclusive test
        cand = np.asarray(self._tree.query_ball_point(q, r * (1 + 1e-9) + 1e-9), dtype=np.intp)
        if cand.size == 0:
            return cand
        return cand[self._dist(q, cand) <= r]

    def knn_positions(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Batched k-NN. Returns ``(positions, distances)`` of shape (n, min(k, len))."""
        if k < 1:
            raise ValueError("k must be >= 1")
        queries = np.asarray(queries, dtype=float).reshape(-1, 2)
        n = len(self._ids)
        kk = min(k, n)
        if kk == n:
            pos = np.broadcast_to(np.arange(n), (len(queries), n))
            return self._sorted_rows(queries, np.array(pos))
        # one extra neighbour reveals ties across the cut-off
        _, cand = self._tree.query(queries, k=kk + 1)
        cand = np.asarray(cand, dtype=np.intp).reshape(len(queries), kk + 1)
        pos, dist = self._sorted_rows(queries, cand)
        out_pos = pos[:, :kk].copy()
        out_dist = dist[:, :kk].copy()
        tied = dist[:, kk] <= dist[:, kk - 1] + 1e-9
        for i in np.flatnonzero(tied):
            p, d = self._exact_knn(queries[i], kk)
            out_pos[i], out_dist[i] = p, d
        return out_pos, out_dist

    def _sorted_rows(self, queries, pos):
        dist = self._dist(queries[:, None, :], pos)
        order = np.lexsort((pos, dist), axis=-1)
        return np.take_along_axis(pos, order, -1), np.take_along_axis(dist, order, -1)

    def _exact_knn(self, q: np.ndarray, k: int):
        # all points within the k-th distance (plus slack), then sort by (dist, id)
        _, cand = self._tree.query(q, k=k)
        cand = np.atleast_1d(cand)
        dk = self._dist(q, cand).max()
        pos = self._radius_positions(q, dk + 1e-6)
        dist = self._dist(q, pos)
        order = np.lexsort((pos, dist))[:k]
        return pos[order], dist[order]

    def radius_positions(self, queries: np.ndarray, r: float) -> list[np.ndarray]:
        """Batched inclusive radius query; one position array per query (unsorted)."""
        if not r > 0:
            raise ValueError(f"radius must be positive, got {r}")
        queries = np.asarray(queries, dtype=float).reshape(-1, 2)
        cands = self._tree.query_ball_point(queries, r * (1 + 1e-9) + 1e-9)
        out = []
        for q, c in zip(queries, cands):
            c = np.asarray(c, dtype=np.intp)
            out.append(c[self._dist(q, c) <= r] if c.size else c)
        return out

    def radius_counts(self, queries: np.ndarray, r: float) -> np.ndarray:
        return np.array([len(p) for p in self.radius_positions(queries, r)], dtype=np.int64)


def build_index(points: Iterable[tuple[Hashable, LocalPoint]]) -> SpatialIndex:
    points = list(points)
    if not points:
        raise ValueError("cannot build a spatial index over an empty point set")
    ids = [pid for pid, _ in points]
    xy = np.array([[p.x, p.y] for _, p in points], dtype=float)
    return SpatialIndex(ids, xy)


def knn(index: SpatialIndex, q: LocalPoint, k: int):
    return index.knn(q, k)


def radius_query(index: SpatialIndex, q: LocalPoint, r: float):
    return index.radius_query(q, r)
