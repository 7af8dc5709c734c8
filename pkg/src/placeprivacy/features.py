"""Temporal and POI-context features for user-location samples."""
from __future__ import annotations

import csv
import math
import re
from collections import defaultdict
from dataclasses import astuple, dataclass, fields
from typing import Sequence

import numpy as np

from .geo import GeoPoint, SpatialIndex, centroid, project_arrays
from .ingest import Poi, UserLocationSample
from .obfuscate import ObfuscationPolicy, obfuscate_samples

DEFAULT_K = 20
DEFAULT_RADIUS = 200.0
NO_SUCCESSOR_LOG_HOURS = math.log(24.0)
FEATURE_MODES = ("temporal", "spatial", "spatiotemporal")


class SchemaMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TemporalFeatures:
    log_visit_count: float
    rel_visit_frequency: float
    mean_log_duration: float
    frac_weekend: float
    frac_morning: float
    frac_afternoon: float
    frac_evening: float
    frac_night: float
    mean_sin_hour: float
    mean_cos_hour: float

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)


@dataclass(frozen=True)
class SpatialFeatures:
    knn_category_counts: np.ndarray
    knn_mean_distance: float
    radius_category_counts: np.ndarray
    radius_min_distance: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([
            self.knn_category_counts, [self.knn_mean_distance],
            self.radius_category_counts, self.radius_min_distance,
        ]).astype(float)


def _slug(name: str) -> str:
    return re.sub(r"[^0-9a-z]+", "_", name.lower()).strip("_")


def temporal_columns() -> list[str]:
    return TemporalFeatures.names()


def spatial_columns(categories: Sequence[str]) -> list[str]:
    slugs = [_slug(c) for c in categories]
    return (
        [f"knn_count_{s}" for s in slugs]
        + ["knn_mean_distance"]
        + [f"radius_count_{s}" for s in slugs]
        + [f"radius_min_distance_{s}" for s in slugs]
    )


def feature_columns(mode: str, categories: Sequence[str]) -> list[str]:
    if mode == "temporal":
        return temporal_columns()
    if mode == "spatial":
        return spatial_columns(categories)
    if mode == "spatiotemporal":
        return temporal_columns() + spatial_columns(categories)
    raise ValueError(f"unknown feature mode {mode!r}")


# -- temporal ------------------------------------------------------------------

def _daytime_block(local_times: np.ndarray) -> np.ndarray:
    """Per-visit daytime indicators and trig encoding, shape (n, 7)."""
    local_times = np.asarray(local_times, dtype=np.int64)
    days = np.floor_divide(local_times, 86400)
    sec = local_times - days * 86400
    weekday = (days + 3) % 7  # 1970-01-01 was a Thursday; Monday == 0
    minutes = sec // 60
    hour = minutes / 60.0
    angle = 2 * np.pi * hour / 24.0
    return np.column_stack([
        weekday >= 5,
        hour < 12,
        (hour >= 12) & (hour < 17),
        (hour >= 17) & (hour < 22),
        hour >= 22,
        np.sin(angle),
        np.cos(angle),
    ]).astype(float)


def temporal_features(
    sample: UserLocationSample,
    user_total_checkins: int,
    next_checkin_times: Sequence[int | None],
) -> TemporalFeatures:
    """Features of one sample from its visit times.

    `next_checkin_times[j]` is the user's first check-in (anywhere) strictly
    after visit j, or None for the user's last check-in overall.
    """
    n = len(sample.visit_times)
    if n == 0:
        raise ValueError("sample has no visits")
    if user_total_checkins < n:
        raise ValueError("user_total_checkins is smaller than the sample's visit count")
    if len(next_checkin_times) != n:
        raise ValueError("one successor time per visit required")
    logs = [
        math.log((nxt - t) / 3600.0)
        for t, nxt in zip(sample.visit_times, next_checkin_times)
        if nxt is not None
    ]
    f_dur = sum(logs) / len(logs) if logs else NO_SUCCESSOR_LOG_HOURS
    block = _daytime_block(np.array(sample.local_times)).mean(axis=0)
    return TemporalFeatures(math.log(n), n / user_total_checkins, f_dur, *map(float, block))


def user_successors(samples: Sequence[UserLocationSample]) -> tuple[dict[str, int], dict[str, np.ndarray]]:
    """Per user: total check-in count and the sorted array of all visit times."""
    times = defaultdict(list)
    for s in samples:
        times[s.user_id].extend(s.visit_times)
    sorted_times = {u: np.sort(np.array(t, dtype=np.int64)) for u, t in times.items()}
    return {u: len(t) for u, t in sorted_times.items()}, sorted_times


def next_times(all_times: np.ndarray, visits: Sequence[int]) -> list[int | None]:
    pos = np.searchsorted(all_times, np.asarray(visits, dtype=np.int64), side="right")
    return [int(all_times[p]) if p < len(all_times) else None for p in pos]


def temporal_matrix(samples: Sequence[UserLocationSample]) -> np.ndarray:
    totals, all_times = user_successors(samples)
    out = np.empty((len(samples), len(temporal_columns())))
    for i, s in enumerate(samples):
        out[i] = temporal_features(s, totals[s.user_id], next_times(all_times[s.user_id], s.visit_times)).as_array()
    return out


# -- spatial -------------------------------------------------------------------

class PoiContext:
    """Public POIs of one city in the local metric frame, with a spatial index."""

    def __init__(self, pois: Sequence[Poi], categories: Sequence[str], anchor: GeoPoint | None = None):
        if not pois:
            raise ValueError("empty POI set")
        self.categories = tuple(categories)
        code = {c: i for i, c in enumerate(self.categories)}
        unknown = {p.category for p in pois} - set(code)
        if unknown:
            raise ValueError(f"POI categories outside the taxonomy: {sorted(unknown)}")
        lat = np.array([p.geo.lat for p in pois])
        lon = np.array([p.geo.lon for p in pois])
        self.anchor = anchor or centroid(lat, lon)
        x, y = project_arrays(self.anchor, lat, lon)
        self.index = SpatialIndex([p.poi_id for p in pois], np.column_stack([x, y]))
        by_id = {p.poi_id: code[p.category] for p in pois}
        # category codes aligned with index positions (which are sorted by id)
        self.codes = np.array([by_id[i] for i in self.index.ids], dtype=np.int64)

    def __len__(self):
        return len(self.index)

    def local_xy(self, points: Sequence[GeoPoint]) -> np.ndarray:
        lat = np.array([p.lat for p in points], dtype=float)
        lon = np.array([p.lon for p in points], dtype=float)
        x, y = project_arrays(self.anchor, lat, lon)
        return np.column_stack([x, y])


def spatial_matrix(xy: np.ndarray, ctx: PoiContext, k: int = DEFAULT_K, r_f: float = DEFAULT_RADIUS) -> np.ndarray:
    """Spatial feature rows for query points `xy` (already masked)."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    n, c = len(xy), len(ctx.categories)
    pos, dist = ctx.index.knn_positions(xy, k)
    knn_counts = np.zeros((n, c))
    np.add.at(knn_counts, (np.repeat(np.arange(n), pos.shape[1]), ctx.codes[pos].ravel()), 1)
    knn_mean = dist.mean(axis=1)

    radius_counts = np.zeros((n, c))
    min_dist = np.full((n, c), float(r_f))
    hits = ctx.index.radius_positions(xy, r_f)
    lengths = np.array([len(h) for h in hits])
    if lengths.sum():
        rows = np.repeat(np.arange(n), lengths)
        p = np.concatenate(hits)
        d = np.hypot(*(ctx.index.xy[p] - xy[rows]).T)
        cats = ctx.codes[p]
        np.add.at(radius_counts, (rows, cats), 1)
        np.minimum.at(min_dist, (rows, cats), d)
    return np.hstack([knn_counts, knn_mean[:, None], radius_counts, min_dist])


def spatial_features(p_obf, ctx: PoiContext, k: int = DEFAULT_K, r_f: float = DEFAULT_RADIUS) -> SpatialFeatures:
    row = spatial_matrix(np.array([[p_obf.x, p_obf.y]]), ctx, k, r_f)[0]
    c = len(ctx.categories)
    return SpatialFeatures(row[:c], float(row[c]), row[c + 1 : 2 * c + 1], row[2 * c + 1 :])


# -- full featurization ----------------------------------------------------------

@dataclass
class FeatureMatrix:
    X: np.ndarray
    y: np.ndarray  # category codes
    columns: list[str]
    keys: list[str]
    radius_used: np.ndarray

    def check_schema(self, columns: Sequence[str]) -> None:
        check_schema(self.columns, columns)

    def to_csv(self, path, categories: Sequence[str]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", *self.columns, "label"])
            for key, row, label in zip(self.keys, self.X, self.y):
                w.writerow([key, *(repr(float(v)) for v in row), categories[label]])


def check_schema(expected: Sequence[str], got: Sequence[str]) -> None:
    if list(expected) != list(got):
        missing = [c for c in expected if c not in got]
        extra = [c for c in got if c not in expected]
        raise SchemaMismatchError(f"feature schema mismatch (missing {missing}, unexpected {extra})")


def featurize(
    samples: Sequence[UserLocationSample],
    mode: str,
    ctx: PoiContext | None,
    policy: ObfuscationPolicy | None = None,
    categories: Sequence[str] | None = None,
    k: int = DEFAULT_K,
    r_f: float = DEFAULT_RADIUS,
) -> FeatureMatrix:
    """Feature matrix and labels for `samples`.

    Spatial columns are computed on masked coordinates; temporal columns
    always use the raw visit times.
    """
    if mode not in FEATURE_MODES:
        raise ValueError(f"unknown feature mode {mode!r}")
    if categories is None:
        if ctx is None:
            raise ValueError("categories are required without a POI context")
        categories = ctx.categories
    if ctx is not None and tuple(categories) != ctx.categories:
        raise ValueError("POI context uses a different category list")
    code = {c: i for i, c in enumerate(categories)}
    y = np.array([code[s.true_category] for s in samples], dtype=np.int64)
    keys = [s.sample_id for s in samples]
    policy = policy or ObfuscationPolicy()
    blocks, radius_used = [], np.zeros(len(samples))
    if mode in ("temporal", "spatiotemporal"):
        blocks.append(temporal_matrix(samples))
    if mode in ("spatial", "spatiotemporal"):
        if ctx is None:
            raise ValueError(f"mode {mode!r} needs a POI context")
        xy = ctx.local_xy([s.geo for s in samples])
        masked, radius_used = obfuscate_samples(xy, keys, policy, ctx.index)
        blocks.append(spatial_matrix(masked, ctx, k, r_f))
    X = np.hstack(blocks) if blocks else np.empty((len(samples), 0))
    return FeatureMatrix(X, y, feature_columns(mode, categories), keys, radius_used)
