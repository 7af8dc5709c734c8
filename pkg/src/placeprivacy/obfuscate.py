"""Location masking applied to sample coordinates before spatial featurization."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geo import LocalPoint, SpatialIndex

MODES = ("none", "fixed", "context_aware")


@dataclass(frozen=True)
class ObfuscationPolicy:
    mode: str = "none"
    radius: float = 0.0
    m: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown obfuscation mode {self.mode!r}")
        if self.mode == "fixed" and not self.radius >= 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")
        if self.mode == "context_aware" and self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")

    @classmethod
    def fixed(cls, radius: float, seed: int = 0) -> "ObfuscationPolicy":
        return cls("fixed", radius=float(radius), seed=seed)

    @classmethod
    def context_aware(cls, m: int, seed: int = 0) -> "ObfuscationPolicy":
        return cls("context_aware", m=int(m), seed=seed)

    @property
    def label(self) -> str:
        if self.mode == "context_aware":
            return f"m{self.m}"
        if self.mode == "fixed":
            return f"r{self.radius:g}"
        return "r0"


def sample_rng(seed: int, key: str) -> np.random.Generator:
    """Independent generator for one sample, derived from (master seed, key)."""
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng(np.random.SeedSequence([seed, int.from_bytes(digest, "little")]))


def _disc_offset(r: float, rng: np.random.Generator) -> tuple[float, float]:
    u, v = rng.random(2)
    rho = r * math.sqrt(u)
    theta = 2 * math.pi * v
    return rho * math.cos(theta), rho * math.sin(theta)


def obfuscate_fixed(p: LocalPoint, r: float, rng: np.random.Generator) -> LocalPoint:
    """Replace `p` by a point drawn uniformly from the disc of radius `r` around it."""
    if r < 0:
        raise ValueError(f"radius must be >= 0, got {r}")
    if r == 0:
        return p
    dx, dy = _disc_offset(r, rng)
    return LocalPoint(p.x + dx, p.y + dy)


def uniform_disc(r, size: int, rng: np.random.Generator) -> np.ndarray:
    """`size` offsets uniform on discs of radius `r` (scalar or per-row array)."""
    u = rng.random(size)
    theta = 2 * np.pi * rng.random(size)
    rho = np.asarray(r, dtype=float) * np.sqrt(u)
    return np.column_stack([rho * np.cos(theta), rho * np.sin(theta)])


def mth_neighbor_distance(index: SpatialIndex, xy: np.ndarray, m: int) -> np.ndarray:
    if len(index) < m:
        raise ValueError(f"need at least {m} POIs, index holds {len(index)}")
    _, dist = index.knn_positions(xy, m)
    return dist[:, m - 1]


def obfuscate_context_aware(p: LocalPoint, index: SpatialIndex, m: int, rng: np.random.Generator) -> tuple[LocalPoint, float]:
    r_used = float(mth_neighbor_distance(index, np.array([[p.x, p.y]]), m)[0])
    return obfuscate_fixed(p, r_used, rng), r_used


def tune_m(index: SpatialIndex, sample_xy: np.ndarray, target_mean_radius: float) -> tuple[int, float]:
    """Smallest m whose mean m-th-nearest-POI distance reaches the target.

    Returns ``(m, achieved_mean_radius)``.
    """
    if not target_mean_radius > 0:
        raise ValueError("target radius must be positive")
    sample_xy = np.asarray(sample_xy, dtype=float).reshape(-1, 2)
    k = min(16, len(index))
    while True:
        _, dist = index.knn_positions(sample_xy, k)
        means = dist.mean(axis=0)
        hit = np.flatnonzero(means >= target_mean_radius)
        if hit.size:
            return int(hit[0]) + 1, float(means[hit[0]])
        if k == len(index):
            raise ValueError(
                f"even m={k} (all POIs) gives mean radius {means[-1]:.1f} m < {target_mean_radius} m"
            )
        k = min(2 * k, len(index))


def obfuscate_samples(
    xy: np.ndarray,
    keys: Sequence[str],
    policy: ObfuscationPolicy,
    poi_index: SpatialIndex | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Obfuscate every row of `xy` under `policy`.

    Each row uses its own generator derived from ``(policy.seed, keys[i])``, so
    the result does not depend on row order or on how work is partitioned.
    Returns the masked coordinates and the radius used per row.
    """
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    if len(keys) != len(xy):
        raise ValueError("one key per coordinate row required")
    if policy.mode == "none" or (policy.mode == "fixed" and policy.radius == 0):
        return xy.copy(), np.zeros(len(xy))
    if policy.mode == "fixed":
        radii = np.full(len(xy), policy.radius)
    else:
        if poi_index is None:
            raise ValueError("context-aware masking needs a POI index")
        radii = mth_neighbor_distance(poi_index, xy, policy.m)
    out = np.empty_like(xy)
    for i, key in enumerate(keys):
        dx, dy = _disc_offset(radii[i], sample_rng(policy.seed, key))
        out[i, 0] = xy[i, 0] + dx
        out[i, 1] = xy[i, 1] + dy
    return out, radii
