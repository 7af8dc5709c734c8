"""Check-in / POI parsing, category cleaning and grouping into samples."""
from __future__ import annotations

import calendar
import csv
import logging
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from itertools import groupby
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geo import GeoPoint

log = logging.getLogger(__name__)

DROP = "DROP"
MERGE_WINDOW_S = 3600
MAX_MALFORMED_FRACTION = 0.01

FOURSQUARE_CATEGORIES = (
    "Arts and Entertainment",
    "Business and Professional Services",
    "Coffee and Dessert",
    "Dining",
    "Education",
    "Health and Medicine",
    "Landmarks and Outdoors",
    "Nightlife",
    "Retail",
    "Spiritual Center",
    "Sports and Recreation",
    "Travel and Transportation",
)

_MONTHS = {m: i for i, m in enumerate(calendar.month_abbr) if m}


class MalformedInputError(ValueError):
    """Too many unparsable records in an input file."""


class UnmappedLabelError(KeyError):
    def __init__(self, label: str):
        super().__init__(label)
        self.label = label

    def __str__(self):
        return f"label {self.label!r} is neither mapped to a category nor on the drop-list"


@dataclass(frozen=True)
class CheckIn:
    user_id: str
    venue_id: str
    raw_category: str
    geo: GeoPoint
    utc_time: int  # seconds since the epoch
    tz_offset: int  # minutes
    category: str | None = None

    @property
    def local_time(self) -> int:
        return self.utc_time + 60 * self.tz_offset


@dataclass(frozen=True)
class Poi:
    poi_id: str
    geo: GeoPoint
    category: str
    subcategory: str = ""


@dataclass(frozen=True)
class UserLocationSample:
    user_id: str
    location_id: str
    geo: GeoPoint
    visit_times: tuple[int, ...]
    true_category: str
    tz_offsets: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.visit_times:
            raise ValueError(f"sample {self.sample_id} has no visits")
        if any(b <= a for a, b in zip(self.visit_times, self.visit_times[1:])):
            raise ValueError(f"visit times of {self.sample_id} are not strictly increasing")
        if not self.tz_offsets:
            object.__setattr__(self, "tz_offsets", (0,) * len(self.visit_times))
        elif len(self.tz_offsets) != len(self.visit_times):
            raise ValueError(f"{self.sample_id}: one tz offset per visit required")

    @property
    def sample_id(self) -> str:
        return f"{self.user_id}|{self.location_id}"

    @property
    def n_visits(self) -> int:
        return len(self.visit_times)

    @property
    def local_times(self) -> tuple[int, ...]:
        return tuple(t + 60 * o for t, o in zip(self.visit_times, self.tz_offsets))


@dataclass
class CategoryTaxonomy:
    categories: tuple[str, ...]
    mapping: dict[str, str] = field(default_factory=dict)
    drop: frozenset[str] = frozenset()

    def __post_init__(self):
        self.categories = tuple(self.categories)
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("duplicate category names")
        bad = {v for v in self.mapping.values() if v not in self.categories}
        if bad:
            raise ValueError(f"mapping targets unknown categories: {sorted(bad)}")
        self.drop = frozenset(self.drop)

    def index(self, category: str) -> int:
        return self.categories.index(category)

    def resolve(self, label: str) -> str | None:
        """Category for `label`, None if it is dropped."""
        if label in self.mapping:
            return self.mapping[label]
        if label in self.drop:
            return None
        raise UnmappedLabelError(label)


def read_mapping(path) -> tuple[dict[str, str], set[str]]:
    """Parse a ``label<TAB>category|DROP`` mapping file."""
    mapping, drop = {}, set()
    for lineno, line in enumerate(_read_text(path).splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected '<label>\\t<category>'")
        label, target = parts[0].strip(), parts[1].strip()
        if target == DROP:
            drop.add(label)
        else:
            mapping[label] = target
    return mapping, drop


def load_taxonomy(path=None, categories: Sequence[str] = FOURSQUARE_CATEGORIES) -> CategoryTaxonomy:
    """Taxonomy from a mapping file; defaults to the shipped Foursquare mapping."""
    if path is None:
        path = resources.files("placeprivacy") / "data" / "foursquare_mapping.tsv"
    mapping, drop = read_mapping(path)
    return CategoryTaxonomy(tuple(categories), mapping, frozenset(drop))


def osm_taxonomy(categories: Sequence[str] = FOURSQUARE_CATEGORIES) -> CategoryTaxonomy:
    return load_taxonomy(resources.files("placeprivacy") / "data" / "osm_mapping.tsv", categories)


def _read_text(path) -> str:
    raw = path.read_bytes() if hasattr(path, "read_bytes") else Path(path).read_bytes()
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError:
        # the 2012 dumps contain a few latin-1 encoded labels
        return raw.decode("latin-1")


def parse_time(s: str) -> int:
    """Parse ``'Tue Apr 03 18:00:09 +0000 2012'`` into epoch seconds (UTC)."""
    parts = s.split()
    if len(parts) != 6:
        raise ValueError(f"bad timestamp {s!r}")
    _, mon, day, hms, tz, year = parts
    hh, mm, ss = (int(v) for v in hms.split(":"))
    sign = -1 if tz.startswith("-") else 1
    tz_min = sign * (int(tz[1:3]) * 60 + int(tz[3:5]))
    ts = calendar.timegm((int(year), _MONTHS[mon], int(day), hh, mm, ss, 0, 0, 0))
    return ts - 60 * tz_min


def _parse_checkin_line(line: str) -> CheckIn:
    f = line.rstrip("\r\n").split("\t")
    if len(f) != 8:
        raise ValueError(f"expected 8 fields, got {len(f)}")
    user, venue, _cat_id, cat_name, lat, lon, tz, when = f
    tz_offset = int(tz)
    if not -720 <= tz_offset <= 840:
        raise ValueError(f"tz offset {tz_offset} out of range")
    return CheckIn(user, venue, cat_name, GeoPoint(float(lat), float(lon)), parse_time(when), tz_offset)


def parse_checkins(path) -> tuple[list[CheckIn], list[int]]:
    """Read a Foursquare check-in TSV.

    Returns the parsed check-ins and the (1-based) numbers of malformed lines.
    More than 1% malformed lines is treated as a wrong input format.
    """
    text = _read_text(path)
    checkins, malformed = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            checkins.append(_parse_checkin_line(line))
        except (ValueError, KeyError):
            malformed.append(lineno)
    total = len(checkins) + len(malformed)
    if total and len(malformed) > MAX_MALFORMED_FRACTION * total:
        shown = ", ".join(map(str, malformed[:20]))
        raise MalformedInputError(
            f"{path}: {len(malformed)} of {total} lines malformed (lines {shown}{', ...' if len(malformed) > 20 else ''})"
        )
    if malformed:
        log.warning("%s: skipped %d malformed lines", path, len(malformed))
    return checkins, malformed


def map_categories(checkins: Iterable[CheckIn], taxonomy: CategoryTaxonomy) -> tuple[list[CheckIn], int]:
    out, dropped = [], 0
    for c in checkins:
        cat = taxonomy.resolve(c.raw_category)
        if cat is None:
            dropped += 1
        else:
            out.append(replace(c, category=cat))
    return out, dropped


def merge_repeat_checkins(checkins: Iterable[CheckIn], window_s: int = MERGE_WINDOW_S) -> tuple[list[CheckIn], int]:
    """Drop check-ins that follow a retained check-in at the same venue within `window_s`.

    The window is anchored at the last *retained* check-in, so a chain of
    check-ins every 50 minutes keeps every other one instead of collapsing
    into a single event.
    """
    checkins = sorted(checkins, key=lambda c: (c.user_id, c.venue_id, c.utc_time))
    kept, removed = [], 0
    for _, group in groupby(checkins, key=lambda c: (c.user_id, c.venue_id)):
        anchor = None
        for c in group:
            if anchor is not None and c.utc_time - anchor <= window_s:
                removed += 1
                continue
            kept.append(c)
            anchor = c.utc_time
    kept.sort(key=lambda c: (c.user_id, c.utc_time, c.venue_id))
    return kept, removed


def group_to_samples(checkins: Iterable[CheckIn]) -> list[UserLocationSample]:
    checkins = sorted(checkins, key=lambda c: (c.user_id, c.venue_id, c.utc_time))
    samples = []
    for (user, venue), group in groupby(checkins, key=lambda c: (c.user_id, c.venue_id)):
        group = list(group)
        if group[0].category is None:
            raise ValueError(f"check-in of {user} at {venue} has no mapped category")
        samples.append(
            UserLocationSample(
                user_id=user,
                location_id=venue,
                geo=group[0].geo,
                visit_times=tuple(c.utc_time for c in group),
                true_category=group[0].category,
                tz_offsets=tuple(c.tz_offset for c in group),
            )
        )
    return samples


def pois_from_checkins(checkins: Iterable[CheckIn], taxonomy: CategoryTaxonomy) -> list[Poi]:
    """Distinct venues of a check-in stream as public POIs (first occurrence wins)."""
    seen: dict[str, Poi] = {}
    for c in sorted(checkins, key=lambda c: (c.utc_time, c.venue_id)):
        if c.venue_id in seen:
            continue
        cat = c.category if c.category is not None else taxonomy.resolve(c.raw_category)
        if cat is None:
            continue
        seen[c.venue_id] = Poi(c.venue_id, c.geo, cat, c.raw_category)
    return sorted(seen.values(), key=lambda p: p.poi_id)


def parse_pois(path, fmt: str, taxonomy: CategoryTaxonomy) -> list[Poi]:
    """Load public POIs.

    ``fmt="foursquare_tsv"`` treats the distinct venues of a check-in file as
    the POI set; ``fmt="osm_mapped_csv"`` reads a ``poi_id,lat,lon,source_label``
    CSV whose labels are resolved through `taxonomy` (e.g. :func:`osm_taxonomy`).
    """
    if fmt == "foursquare_tsv":
        checkins, _ = parse_checkins(path)
        return pois_from_checkins(checkins, taxonomy)
    if fmt != "osm_mapped_csv":
        raise ValueError(f"unknown POI format {fmt!r}")
    pois = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"poi_id", "lat", "lon", "source_label"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            label = row["source_label"].strip()
            cat = taxonomy.resolve(label)
            if cat is None:
                continue
            pois.append(Poi(row["poi_id"], GeoPoint(float(row["lat"]), float(row["lon"])), cat, label))
    return pois


def subsample_pois(pois: Sequence[Poi], fraction: float, seed: int) -> list[Poi]:
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n_keep = math.floor(fraction * len(pois))
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(pois), size=n_keep, replace=False))
    return [pois[i] for i in keep]


# -- canonical CSV files -------------------------------------------------------

SAMPLE_COLUMNS = ["user_id", "location_id", "lat", "lon", "category", "visit_times", "tz_offsets"]
POI_COLUMNS = ["poi_id", "lat", "lon", "category", "subcategory"]


def write_samples(samples: Iterable[UserLocationSample], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SAMPLE_COLUMNS)
        for s in samples:
            w.writerow([
                s.user_id, s.location_id, repr(s.geo.lat), repr(s.geo.lon), s.true_category,
                ";".join(map(str, s.visit_times)), ";".join(map(str, s.tz_offsets)),
            ])


def read_samples(path) -> list[UserLocationSample]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(UserLocationSample(
                user_id=row["user_id"],
                location_id=row["location_id"],
                geo=GeoPoint(float(row["lat"]), float(row["lon"])),
                visit_times=tuple(int(t) for t in row["visit_times"].split(";")),
                true_category=row["category"],
                tz_offsets=tuple(int(t) for t in row["tz_offsets"].split(";")),
            ))
    return out


def write_pois(pois: Iterable[Poi], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POI_COLUMNS)
        for p in pois:
            w.writerow([p.poi_id, repr(p.geo.lat), repr(p.geo.lon), p.category, p.subcategory])


def read_pois(path) -> list[Poi]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            Poi(r["poi_id"], GeoPoint(float(r["lat"]), float(r["lon"])), r["category"], r.get("subcategory", ""))
            for r in csv.DictReader(fh)
        ]
