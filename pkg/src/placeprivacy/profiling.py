"""User profiles built from place categories, and the privacy metrics on top of them.

A profile is the visit-frequency vector of a user over place categories.
Predicted profiles come either from hard labels (counting argmax predictions)
or from soft labels (averaging predicted class probabilities).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

PL_EPSILON = 1e-6
GOLDEN = (math.sqrt(5) - 1) / 2


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    vector: np.ndarray
    total_visit_weight: float

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=float)
        if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
            raise ValueError(f"profile of {self.user_id} is not on the simplex")
        object.__setattr__(self, "vector", v)


def _normalize(v: np.ndarray) -> np.ndarray:
    s = v.sum()
    if s <= 0:
        raise ValueError("cannot build a profile from zero visit weight")
    return v / s


def true_profile(user_id: str, categories: Sequence[int], weights: Sequence[float], n_classes: int) -> UserProfile:
    """Ground-truth profile from the category codes and visit counts of one user's locations."""
    w = np.asarray(weights, dtype=float)
    v = np.bincount(np.asarray(categories, dtype=np.int64), weights=w, minlength=n_classes)
    return UserProfile(user_id, _normalize(v), float(w.sum()))


def predicted_profile(
    user_id: str,
    weights: Sequence[float],
    n_classes: int,
    mode: str = "soft",
    labels: Sequence[int] | None = None,
    proba: np.ndarray | None = None,
) -> UserProfile:
    w = np.asarray(weights, dtype=float)
    if mode == "hard":
        if labels is None:
            if proba is None:
                raise ValueError("hard profiling needs labels or probabilities")
            labels = np.asarray(proba).argmax(axis=1)
        v = np.bincount(np.asarray(labels, dtype=np.int64), weights=w, minlength=n_classes)
    elif mode == "soft":
        if proba is None:
            raise ValueError("soft profiling needs probability rows")
        proba = np.asarray(proba, dtype=float)
        if proba.shape != (len(w), n_classes):
            raise ValueError(f"expected probabilities of shape {(len(w), n_classes)}, got {proba.shape}")
        v = w @ proba
    else:
        raise ValueError(f"unknown profiling mode {mode!r}")
    return UserProfile(user_id, _normalize(v), float(w.sum()))


def profiling_error(p_hat, p) -> float:
    """Euclidean distance between two profiles."""
    a = np.asarray(getattr(p_hat, "vector", p_hat), dtype=float)
    b = np.asarray(getattr(p, "vector", p), dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"profile dimensions differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def _pairwise(pred: np.ndarray, pool: np.ndarray) -> np.ndarray:
    diff = pred[:, None, :] - pool[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def match_ranks(pred: np.ndarray, pool: np.ndarray, user_ids: Sequence[str] | None = None) -> np.ndarray:
    """0-based rank of each user's true profile among the pool, nearest first.

    Row i of `pred` belongs to pool member i. Equal distances are ordered by
    user id (pool order if ids are not given).
    """
    pred = np.asarray(pred, dtype=float)
    pool = np.asarray(pool, dtype=float)
    if pred.shape != pool.shape:
        raise ValueError("one predicted profile per pool member required")
    n = len(pool)
    order_key = np.argsort(np.argsort(np.asarray(user_ids), kind="stable")) if user_ids is not None else np.arange(n)
    ranks = np.empty(n, dtype=np.int64)
    for start in range(0, n, 512):
        d = _pairwise(pred[start:start + 512], pool)
        rows = np.arange(start, min(start + 512, n))
        own = d[np.arange(len(rows)), rows][:, None]
        closer = (d < own) | ((d == own) & (order_key[None, :] < order_key[rows][:, None]))
        ranks[rows] = closer.sum(axis=1)
    return ranks


def reidentify(pred: np.ndarray, pool: np.ndarray, k: int, user_ids: Sequence[str] | None = None) -> float:
    """hit@k: share of users whose true profile is among the k pool profiles nearest to their prediction."""
    return float(np.mean(match_ranks(pred, pool, user_ids) < k))


def attack_probabilities(p_hat: np.ndarray, pool: np.ndarray, eps: float = PL_EPSILON) -> np.ndarray:
    """Softmax over the pool of inverse profile distances to `p_hat`."""
    d = np.sqrt(np.sum((np.asarray(pool, dtype=float) - np.asarray(p_hat, dtype=float)) ** 2, axis=1))
    sim = 1.0 / (d + eps)
    z = np.exp(sim - sim.max())
    return z / z.sum()


def privacy_loss(p_hat: np.ndarray, pool: np.ndarray, true_index: int, eps: float = PL_EPSILON) -> float:
    pool = np.asarray(pool, dtype=float)
    if len(pool) < 2:
        raise ValueError("privacy loss needs a pool of at least two users")
    return float(attack_probabilities(p_hat, pool, eps)[true_index] * len(pool))


def privacy_losses(pred: np.ndarray, pool: np.ndarray, eps: float = PL_EPSILON) -> np.ndarray:
    return np.array([privacy_loss(pred[i], pool, i, eps) for i in range(len(pool))])


@dataclass
class PrivacyLossReport:
    user_ids: list[str]
    true_profiles: np.ndarray
    predicted_profiles: np.ndarray
    errors: np.ndarray
    privacy_loss: np.ndarray
    hit_at: dict[int, float]
    mode: str

    @property
    def mean_error(self) -> float:
        return float(self.errors.mean())

    @property
    def median_pl(self) -> float:
        return float(np.median(self.privacy_loss))

    def cdf(self, n_points: int = 101) -> list[tuple[float, float]]:
        """(PL value, share of users with PL <= value) on quantile grid points."""
        qs = np.linspace(0, 1, n_points)
        vals = np.quantile(self.privacy_loss, qs)
        return [(float(v), float(np.mean(self.privacy_loss <= v))) for v in vals]

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "n_users": len(self.user_ids),
            "profiling_error": self.mean_error,
            "hit_at": {str(k): v for k, v in self.hit_at.items()},
            "median_pl": self.median_pl,
            "mean_pl": float(self.privacy_loss.mean()),
        }

    def write_csv(self, path, categories: Sequence[str]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user_id", *[f"true_{c}" for c in categories], *[f"pred_{c}" for c in categories],
                        "error", "privacy_loss"])
            for i, u in enumerate(self.user_ids):
                w.writerow([u, *(f"{v:.6g}" for v in self.true_profiles[i]),
                            *(f"{v:.6g}" for v in self.predicted_profiles[i]),
                            repr(float(self.errors[i])), repr(float(self.privacy_loss[i]))])


def profile_users(
    user_ids: Sequence[str],
    y_true: np.ndarray,
    weights: np.ndarray,
    n_classes: int,
    mode: str = "soft",
    y_pred: np.ndarray | None = None,
    proba: np.ndarray | None = None,
    weighted: bool = True,
    ks: Sequence[int] = (1, 5),
) -> PrivacyLossReport:
    """Profiles, profiling error, hit@k and privacy loss for every user of a pool.

    Inputs are aligned per sample. With ``weighted=False`` every location counts
    once regardless of its number of visits.
    """
    user_ids = np.asarray(user_ids)
    weights = np.asarray(weights, dtype=float) if weighted else np.ones(len(user_ids))
    users, inverse = np.unique(user_ids, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(users) + 1))
    truth = np.zeros((len(users), n_classes))
    pred = np.zeros((len(users), n_classes))
    for u in range(len(users)):
        idx = order[bounds[u]:bounds[u + 1]]
        truth[u] = true_profile(users[u], y_true[idx], weights[idx], n_classes).vector
        pred[u] = predicted_profile(
            users[u], weights[idx], n_classes, mode,
            labels=None if y_pred is None else y_pred[idx],
            proba=None if proba is None else proba[idx],
        ).vector
    errors = np.sqrt(np.sum((pred - truth) ** 2, axis=1))
    ranks = match_ranks(pred, truth, users)
    pl = privacy_losses(pred, truth) if len(users) >= 2 else np.ones(len(users))
    return PrivacyLossReport(
        [str(u) for u in users], truth, pred, errors, pl,
        {int(k): float(np.mean(ranks < k)) for k in ks}, mode,
    )


# -- exponential decay fit -------------------------------------------------------

@dataclass(frozen=True)
class DecayFit:
    """``f(x) = a + c * exp(-lam * x)``"""

    a: float
    c: float
    lam: float
    rss: float

    def __call__(self, x):
        return self.a + self.c * np.exp(-self.lam * np.asarray(x, dtype=float))

    def half_radius(self) -> float:
        """Distance over which the decaying part halves."""
        return math.log(2) / self.lam if self.lam > 0 else math.inf

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _linear_fit(x, y, lam):
    basis = np.column_stack([np.ones_like(x), np.exp(-lam * x)])
    coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
    resid = y - basis @ coef
    return float(coef[0]), float(coef[1]), float(resid @ resid)


def fit_decay(xs, ys, lam_max: float = 0.1, tol: float = 1e-7, grid: int = 201) -> DecayFit:
    """Least-squares fit of ``a + c * exp(-lam * x)``.

    For fixed ``lam`` the model is linear in ``(a, c)`` and solved in closed
    form; ``lam`` is bracketed on a coarse grid over ``[0, lam_max]`` and then
    refined by golden-section search to tolerance `tol`.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if len(x) < 3 or len(x) != len(y):
        raise ValueError("need at least 3 (x, y) points")
    if len(np.unique(x)) != len(x):
        raise ValueError("x values must be distinct")
    if np.ptp(y) == 0:
        return DecayFit(float(y.mean()), 0.0, 0.0, 0.0)

    def rss(lam):
        return _linear_fit(x, y, lam)[2]

    lams = np.linspace(0.0, lam_max, grid)
    vals = np.array([rss(v) for v in lams])
    i = int(np.argmin(vals))
    lo, hi = lams[max(i - 1, 0)], lams[min(i + 1, grid - 1)]
    c1 = hi - GOLDEN * (hi - lo)
    c2 = lo + GOLDEN * (hi - lo)
    f1, f2 = rss(c1), rss(c2)
    while hi - lo > tol:
        if f1 <= f2:
            hi, c2, f2 = c2, c1, f1
            c1 = hi - GOLDEN * (hi - lo)
            f1 = rss(c1)
        else:
            lo, c1, f1 = c1, c2, f2
            c2 = lo + GOLDEN * (hi - lo)
            f2 = rss(c2)
    lam = 0.5 * (lo + hi)
    a, c, r = _linear_fit(x, y, lam)
    if vals[i] < r:
        lam = float(lams[i])
        a, c, r = _linear_fit(x, y, lam)
    return DecayFit(a, c, float(lam), r)
