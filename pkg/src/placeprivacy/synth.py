"""Synthetic cities with known ground truth.

POIs are placed in per-category Gaussian blobs (spatial autocorrelation),
users draw visits from personal category preferences, and every category has
its own time-of-day and weekend pattern so that temporal features carry
signal. Check-ins sit exactly on POI coordinates, as in the Foursquare data.
"""
from __future__ import annotations

import calendar
import os
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geo import GeoPoint, unproject_arrays
from .ingest import FOURSQUARE_CATEGORIES, CategoryTaxonomy, CheckIn, Poi, write_pois

START_TIME = calendar.timegm((2012, 4, 2, 0, 0, 0, 0, 0, 0))


@dataclass
class SynthSpec:
    categories: Sequence[str] = FOURSQUARE_CATEGORIES
    shares: Sequence[float] | None = None  # default: equal shares
    region_km: float = 6.0
    n_pois: int = 3000
    clusters_per_category: int = 8
    cluster_radius: float | None = 150.0  # blob std in meters; None places POIs uniformly
    clustered_fraction: float = 0.9
    n_users: int = 200
    mean_visits: float = 40.0
    new_location_prob: float = 0.35
    preference_concentration: float = 1.0
    temporal_signal: bool = True
    hour_sd: float = 1.5
    n_days: int = 120
    tz_offset: int = -240
    anchor: GeoPoint = field(default_factory=lambda: GeoPoint(40.73, -73.99))
    seed: int = 0

    def __post_init__(self):
        self.categories = tuple(self.categories)
        if self.shares is None:
            self.shares = tuple(np.full(len(self.categories), 1 / len(self.categories)))
        shares = np.asarray(self.shares, dtype=float)
        if len(shares) != len(self.categories) or np.any(shares < 0) or abs(shares.sum() - 1) > 1e-9:
            raise ValueError("category shares must be non-negative, one per category, and sum to 1")
        if min(self.n_pois, self.n_users, self.n_days) <= 0 or self.mean_visits <= 0 or self.region_km <= 0:
            raise ValueError("counts and sizes must be positive")

    def taxonomy(self) -> CategoryTaxonomy:
        return CategoryTaxonomy(self.categories, {c: c for c in self.categories})


def _place_pois(spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    side = spec.region_km * 1000.0
    n_cat = len(spec.categories)
    codes = rng.choice(n_cat, size=spec.n_pois, p=np.asarray(spec.shares, dtype=float))
    xy = rng.uniform(-side / 2, side / 2, size=(spec.n_pois, 2))
    if spec.cluster_radius:
        centers = rng.uniform(-side / 2, side / 2, size=(n_cat, spec.clusters_per_category, 2))
        in_cluster = rng.random(spec.n_pois) < spec.clustered_fraction
        which = rng.integers(0, spec.clusters_per_category, spec.n_pois)
        blob = centers[codes, which] + rng.normal(0, spec.cluster_radius, size=(spec.n_pois, 2))
        # blob points outside the region keep their uniform position (clipping would stack them on the edge)
        inside = np.all(np.abs(blob) <= side / 2, axis=1)
        xy = np.where((in_cluster & inside)[:, None], blob, xy)
    return xy, codes


def _category_rhythm(spec: SynthSpec):
    n_cat = len(spec.categories)
    peaks = 7.0 + 16.0 * np.arange(n_cat) / max(n_cat - 1, 1)
    weekend = np.linspace(0.15, 0.6, n_cat)[np.argsort(np.random.default_rng(spec.seed + 1).random(n_cat))]
    return peaks, weekend


def generate(spec: SynthSpec) -> tuple[list[Poi], list[CheckIn]]:
    rng = np.random.default_rng(spec.seed)
    xy, codes = _place_pois(spec, rng)
    lat, lon = unproject_arrays(spec.anchor, xy[:, 0], xy[:, 1])
    pois = [
        Poi(f"p{i:06d}", GeoPoint(float(lat[i]), float(lon[i])), spec.categories[codes[i]], spec.categories[codes[i]])
        for i in range(spec.n_pois)
    ]
    n_cat = len(spec.categories)
    by_cat = [np.flatnonzero(codes == c) for c in range(n_cat)]
    available = np.array([len(b) > 0 for b in by_cat])
    shares = np.asarray(spec.shares, dtype=float) * available
    shares /= shares.sum()
    peaks, weekend_p = _category_rhythm(spec)

    checkins = []
    for u in range(spec.n_users):
        user = f"u{u:05d}"
        alpha = spec.preference_concentration * n_cat * np.where(shares > 0, shares, 0) + 1e-9
        pref = rng.dirichlet(alpha) * available
        pref /= pref.sum()
        n_visits = 1 + rng.poisson(spec.mean_visits - 1) if spec.mean_visits > 1 else 1
        favourites: dict[int, list[int]] = {}
        used: set[int] = set()
        for _ in range(n_visits):
            c = int(rng.choice(n_cat, p=pref))
            fav = favourites.setdefault(c, [])
            if not fav or rng.random() < spec.new_location_prob:
                fav.append(int(rng.choice(by_cat[c])))
            poi = fav[int(rng.integers(len(fav)))]
            if spec.temporal_signal:
                weekend = rng.random() < weekend_p[c]
                hour = (rng.normal(peaks[c], spec.hour_sd)) % 24.0
            else:
                weekend = rng.random() < 2 / 7
                hour = rng.uniform(0, 24)
            week = int(rng.integers(0, max(spec.n_days // 7, 1)))
            day = week * 7 + (int(rng.integers(5, 7)) if weekend else int(rng.integers(0, 5)))
            local = START_TIME + day * 86400 + int(hour * 3600) + int(rng.integers(0, 60))
            utc = local - 60 * spec.tz_offset
            while utc in used:
                utc += 1
            used.add(utc)
            p = pois[poi]
            checkins.append(CheckIn(user, p.poi_id, p.category, p.geo, utc, spec.tz_offset, p.category))
    checkins.sort(key=lambda c: (c.user_id, c.utc_time))
    return pois, checkins


def format_time(ts: int) -> str:
    return time.strftime("%a %b %d %H:%M:%S +0000 %Y", time.gmtime(ts))


def write_checkins_tsv(checkins: Sequence[CheckIn], path, categories: Sequence[str]) -> None:
    """Write check-ins in the 8-column Foursquare TSV layout."""
    cat_id = {c: f"synthcat{i:02d}" for i, c in enumerate(categories)}
    with open(path, "w", encoding="utf-8") as fh:
        for c in checkins:
            fh.write("\t".join([
                c.user_id, c.venue_id, cat_id.get(c.raw_category, "synthcat"), c.raw_category,
                f"{c.geo.lat:.8f}", f"{c.geo.lon:.8f}", str(c.tz_offset), format_time(c.utc_time),
            ]) + "\n")


def write_city(spec: SynthSpec, outdir) -> dict[str, str]:
    """Generate a city; write the check-in TSV, canonical POI CSV and an identity mapping."""
    os.makedirs(outdir, exist_ok=True)
    pois, checkins = generate(spec)
    paths = {
        "checkins": os.path.join(outdir, "checkins.tsv"),
        "pois": os.path.join(outdir, "pois.csv"),
        "mapping": os.path.join(outdir, "mapping.tsv"),
    }
    write_checkins_tsv(checkins, paths["checkins"], spec.categories)
    write_pois(pois, paths["pois"])
    with open(paths["mapping"], "w", encoding="utf-8") as fh:
        fh.write("# synthetic labels map onto themselves\n")
        for c in spec.categories:
            fh.write(f"{c}\t{c}\n")
    return paths
