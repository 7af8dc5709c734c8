"""Experiment configuration (YAML) with dotted-key overrides."""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Any

import yaml

from .evaluation import SCENARIOS
from .ingest import FOURSQUARE_CATEGORIES
from .model import GbdtParams


class ConfigError(ValueError):
    pass


@dataclass
class PoiSource:
    path: str | None = None  # None: venues of the city's check-in file
    format: str = "foursquare_tsv"  # foursquare_tsv | osm_mapped_csv | canonical_csv
    mapping: str | None = None


@dataclass
class CityConfig:
    name: str
    checkins: str
    anchor: tuple[float, float] | None = None
    pois: PoiSource = field(default_factory=PoiSource)


@dataclass
class SweepConfig:
    radii: list[float] = field(default_factory=lambda: [0, 50, 100, 200, 400, 800, 1200])
    context_aware_m: list[int] = field(default_factory=list)
    tune_target_radius: float | None = None


@dataclass
class VariogramConfig:
    city: str | None = None
    size_km: float = 20.0
    center: tuple[float, float] | None = None
    n_pairs: int = 2_000_000
    bins: list[float] = field(default_factory=lambda: [0, 25, 50, 100, 200, 400, 800, 1600, 3200, 6400])


@dataclass
class ExperimentConfig:
    cities: list[CityConfig]
    output_dir: str = "out"
    seed: int = 0
    categories: list[str] = field(default_factory=lambda: list(FOURSQUARE_CATEGORIES))
    mapping: str | None = None
    scenarios: list[str] = field(default_factory=lambda: list(SCENARIOS))
    sweep: SweepConfig = field(default_factory=SweepConfig)
    poi_fraction: float = 1.0
    split: str = "user_cv"
    n_folds: int = 10
    k: int = 20
    feature_radius: float = 200.0
    model: GbdtParams = field(default_factory=GbdtParams)
    profiling_weighted: bool = True
    pool: str = "per_city"  # per_city | joint
    density_radius: float = 200.0
    density_edges: list[float] = field(default_factory=lambda: [0, 10, 25, 50, 100, 200, 1e12])
    variogram: VariogramConfig = field(default_factory=VariogramConfig)
    base_dir: str = "."

    def resolve(self, path: str | None) -> str | None:
        if path is None:
            return None
        return path if os.path.isabs(path) else os.path.normpath(os.path.join(self.base_dir, path))

    @property
    def out(self) -> str:
        return self.resolve(self.output_dir)

    def city(self, name: str | None) -> CityConfig:
        if name is None:
            return self.cities[0]
        for c in self.cities:
            if c.name == name:
                return c
        raise ConfigError(f"no city named {name!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def validate(self, check_files: bool = True) -> None:
        if not self.cities:
            raise ConfigError("at least one city is required")
        if len({c.name for c in self.cities}) != len(self.cities):
            raise ConfigError("city names must be unique")
        unknown = set(self.scenarios) - set(SCENARIOS)
        if unknown:
            raise ConfigError(f"unknown scenarios: {sorted(unknown)}")
        if any(r < 0 for r in self.sweep.radii):
            raise ConfigError("obfuscation radii must be >= 0")
        if any(m < 1 for m in self.sweep.context_aware_m):
            raise ConfigError("context-aware m must be >= 1")
        if not 0 < self.poi_fraction <= 1:
            raise ConfigError("poi_fraction must be in (0, 1]")
        if self.split not in ("user_cv", "spatial_grid"):
            raise ConfigError(f"unknown split {self.split!r}")
        if self.pool not in ("per_city", "joint"):
            raise ConfigError(f"unknown pool {self.pool!r}")
        if self.n_folds < 2:
            raise ConfigError("n_folds must be >= 2")
        for c in self.cities:
            if c.pois.format not in ("foursquare_tsv", "osm_mapped_csv", "canonical_csv"):
                raise ConfigError(f"{c.name}: unknown POI format {c.pois.format!r}")
        if check_files:
            paths = [self.mapping] + [p for c in self.cities for p in (c.checkins, c.pois.path, c.pois.mapping)]
            for p in paths:
                if p is not None and not os.path.exists(self.resolve(p)):
                    raise ConfigError(f"file not found: {self.resolve(p)}")


def _set_dotted(d: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


def parse_overrides(pairs: list[str]) -> list[tuple[str, Any]]:
    out = []
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        out.append((k.strip(), yaml.safe_load(v)))
    return out


def _tuple_or_none(v):
    return None if v is None else tuple(float(x) for x in v)


def from_dict(raw: dict, base_dir: str = ".") -> ExperimentConfig:
    raw = copy.deepcopy(raw or {})
    try:
        cities = []
        for c in raw.pop("cities", []):
            pois = PoiSource(**(c.pop("pois", None) or {}))
            cities.append(CityConfig(name=str(c.pop("name")), checkins=c.pop("checkins"),
                                     anchor=_tuple_or_none(c.pop("anchor", None)), pois=pois))
            if c:
                raise ConfigError(f"unknown city keys: {sorted(c)}")
        sweep = SweepConfig(**(raw.pop("sweep", None) or {}))
        vario = raw.pop("variogram", None) or {}
        if "center" in vario:
            vario["center"] = _tuple_or_none(vario["center"])
        model = GbdtParams(**(raw.pop("model", None) or {}))
        cfg = ExperimentConfig(cities=cities, sweep=sweep, variogram=VariogramConfig(**vario), model=model,
                               base_dir=base_dir, **raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: str, overrides: list[str] | None = None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    for k, v in parse_overrides(overrides or []):
        _set_dotted(raw, k, v)
    return from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)))
