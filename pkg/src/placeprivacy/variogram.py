"""Semivariogram of place categories from randomly sampled POI pairs."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

DEFAULT_BINS = (0, 25, 50, 100, 200, 400, 800, 1600, 3200, 6400)
CHUNK = 1_000_000


@dataclass
class VariogramResult:
    edges: np.ndarray
    gamma: np.ndarray  # NaN where a bin holds no pairs
    counts: np.ndarray
    bounds: tuple[float, float, float, float] | None = None  # xmin, ymin, xmax, ymax
    n_points: int = 0
    n_pairs: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def rows(self):
        for lo, hi, g, n in zip(self.edges[:-1], self.edges[1:], self.gamma, self.counts):
            yield float(lo), float(hi), (None if np.isnan(g) else float(g)), int(n)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "gamma", "n_pairs"])
            for lo, hi, g, n in self.rows():
                w.writerow([f"{lo:g}", f"{hi:g}", "" if g is None else repr(g), n])


def subregion_mask(xy: np.ndarray, center: tuple[float, float], size_m: float) -> np.ndarray:
    half = size_m / 2
    return (np.abs(xy[:, 0] - center[0]) <= half) & (np.abs(xy[:, 1] - center[1]) <= half)


def semivariogram(
    xy: np.ndarray,
    codes: np.ndarray,
    n_pairs: int,
    bins=DEFAULT_BINS,
    seed: int = 0,
    center: tuple[float, float] | None = None,
    size_m: float | None = None,
) -> VariogramResult:
    """Share of POI pairs with *different* categories per distance bin ``(lo, hi]``.

    Pairs are drawn uniformly at random (two distinct POIs per draw) from the
    points inside the optional square subregion of side `size_m` around `center`.
    """
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    codes = np.asarray(codes)
    edges = np.asarray(bins, dtype=float)
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bins must be strictly ascending")
    bounds = None
    if size_m is not None:
        center = center if center is not None else tuple(np.median(xy, axis=0))
        m = subregion_mask(xy, center, size_m)
        xy, codes = xy[m], codes[m]
        h = size_m / 2
        bounds = (center[0] - h, center[1] - h, center[0] + h, center[1] + h)
    n = len(xy)
    if n < 2:
        raise ValueError("need at least two POIs in the subregion")
    rng = np.random.default_rng(seed)
    nb = len(edges) - 1
    differ = np.zeros(nb, dtype=np.int64)
    counts = np.zeros(nb, dtype=np.int64)
    remaining = int(n_pairs)
    while remaining > 0:
        size = min(CHUNK, remaining)
        remaining -= size
        i = rng.integers(0, n, size)
        j = rng.integers(0, n - 1, size)
        j = j + (j >= i)  # second index uniform over the other n-1 points
        d = np.hypot(*(xy[i] - xy[j]).T)
        b = np.searchsorted(edges, d, side="left") - 1  # bin (lo, hi]
        ok = (b >= 0) & (b < nb)
        counts += np.bincount(b[ok], minlength=nb)
        differ += np.bincount(b[ok], weights=(codes[i] != codes[j])[ok], minlength=nb).astype(np.int64)
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(counts > 0, differ / np.maximum(counts, 1), np.nan)
    return VariogramResult(edges, gamma, counts, bounds, n, int(n_pairs), seed)
