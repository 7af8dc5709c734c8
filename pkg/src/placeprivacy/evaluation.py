"""Cross-validation splits, attack scenarios and place-categorization metrics."""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .features import FeatureMatrix, PoiContext, feature_columns, featurize
from .ingest import UserLocationSample
from .model import ClassFrequencyBaseline, GbdtParams, spatial_join_codes, train_gbdt
from .obfuscate import ObfuscationPolicy, obfuscate_samples

SCENARIOS = ("uninformed", "spatial_join", "gbdt_temporal", "gbdt_spatial", "gbdt_spatiotemporal")
WORKERS_ENV = "PLACEPRIVACY_WORKERS"
DEFAULT_DENSITY_EDGES = (0, 10, 25, 50, 100, 200, np.inf)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def parallel_map(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


# -- splits ----------------------------------------------------------------------

@dataclass
class SplitPlan:
    mode: str
    folds: np.ndarray  # fold index per sample
    n_folds: int
    seed: int | None = None
    cuts: dict = field(default_factory=dict)

    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.folds, minlength=self.n_folds)

    def size_ratio(self) -> float:
        sizes = self.fold_sizes()
        sizes = sizes[sizes > 0]
        return float(sizes.max() / sizes.min())


def make_user_folds(samples: Sequence[UserLocationSample], k: int = 10, seed: int = 0) -> SplitPlan:
    users = sorted({s.user_id for s in samples})
    if len(users) < k:
        raise ValueError(f"{len(users)} users cannot be split into {k} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(users))
    fold_of = {}
    for f, group in enumerate(np.array_split(perm, k)):
        for i in group:
            fold_of[users[i]] = f
    return SplitPlan("user_cv", np.array([fold_of[s.user_id] for s in samples], dtype=np.int64), k, seed)


def make_spatial_folds(samples: Sequence[UserLocationSample]) -> SplitPlan:
    """3x3 grid with cuts at the empirical terciles of longitude and latitude."""
    if len(samples) < 9:
        raise ValueError("at least 9 samples are needed for a 3x3 spatial split")
    x = np.array([s.geo.lon for s in samples])
    y = np.array([s.geo.lat for s in samples])
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("degenerate coordinates: cannot cut a spatial grid")
    cx = np.quantile(x, [1 / 3, 2 / 3])
    cy = np.quantile(y, [1 / 3, 2 / 3])
    xb = np.searchsorted(cx, x, side="left")
    yb = np.searchsorted(cy, y, side="left")
    folds = (xb * 3 + yb).astype(np.int64)
    return SplitPlan("spatial_grid", folds, 9, None, {"x": cx.tolist(), "y": cy.tolist()})


# -- metrics ---------------------------------------------------------------------

def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    return float(np.mean(y_true == np.asarray(y_pred))) if len(y_true) else float("nan")


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def normalize_rows(cm: np.ndarray) -> np.ndarray:
    support = cm.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, cm / np.maximum(support, 1), 0.0)


def sensitivity(cm: np.ndarray) -> np.ndarray:
    """Per-class recall; NaN for classes without support."""
    support = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, np.diag(cm) / np.maximum(support, 1), np.nan)


@dataclass
class EvaluationReport:
    scenario: str
    policy: str
    radius: float
    categories: list[str]
    keys: list[str]
    user_ids: list[str]
    weights: np.ndarray  # visits per sample
    y_true: np.ndarray
    y_pred: np.ndarray
    proba: np.ndarray
    folds: np.ndarray
    radius_used: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.categories)

    @property
    def correct(self) -> np.ndarray:
        return self.y_true == self.y_pred

    @property
    def accuracy(self) -> float:
        return accuracy(self.y_true, self.y_pred)

    @property
    def confusion(self) -> np.ndarray:
        return confusion_matrix(self.y_true, self.y_pred, self.n_classes)

    @property
    def confusion_normalized(self) -> np.ndarray:
        return normalize_rows(self.confusion)

    @property
    def sensitivity(self) -> np.ndarray:
        return sensitivity(self.confusion)

    def fold_accuracies(self) -> dict[int, tuple[float, int]]:
        out = {}
        for f in np.unique(self.folds):
            m = self.folds == f
            out[int(f)] = (accuracy(self.y_true[m], self.y_pred[m]), int(m.sum()))
        return out

    def summary(self) -> dict:
        return {
            "scenario": self.scenario,
            "policy": self.policy,
            "radius": self.radius,
            "mean_radius_used": float(self.radius_used.mean()) if len(self.radius_used) else 0.0,
            "n_samples": len(self.y_true),
            "accuracy": self.accuracy,
            "sensitivity": dict(zip(self.categories, _nan_to_none(self.sensitivity))),
            "fold_accuracy": {str(f): {"accuracy": a, "n": n} for f, (a, n) in self.fold_accuracies().items()},
            "confusion": self.confusion.tolist(),
            "confusion_normalized": self.confusion_normalized.tolist(),
        }

    def write(self, outdir, prefix: str) -> None:
        os.makedirs(outdir, exist_ok=True)
        with open(os.path.join(outdir, f"{prefix}report.json"), "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
        _write_matrix(os.path.join(outdir, f"{prefix}confusion.csv"), self.confusion, self.categories)
        _write_matrix(os.path.join(outdir, f"{prefix}confusion_normalized.csv"), self.confusion_normalized, self.categories)
        with open(os.path.join(outdir, f"{prefix}sensitivity.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["category", "support", "sensitivity"])
            for c, sup, sens in zip(self.categories, self.confusion.sum(axis=1), self.sensitivity):
                w.writerow([c, int(sup), "" if np.isnan(sens) else repr(float(sens))])
        with open(os.path.join(outdir, f"{prefix}predictions.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "user_id", "fold", "true", "pred", *[f"p_{c}" for c in self.categories]])
            for i, key in enumerate(self.keys):
                w.writerow([key, self.user_ids[i], int(self.folds[i]), self.categories[self.y_true[i]],
                            self.categories[self.y_pred[i]], *(f"{v:.6g}" for v in self.proba[i])])


def _nan_to_none(arr):
    return [None if np.isnan(v) else float(v) for v in arr]


def _write_matrix(path, m: np.ndarray, categories: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred", *categories])
        for c, row in zip(categories, m):
            w.writerow([c, *(repr(float(v)) if m.dtype.kind == "f" else int(v) for v in row)])


# -- scenarios -------------------------------------------------------------------

def _feature_mode(scenario: str) -> str | None:
    return {"gbdt_temporal": "temporal", "gbdt_spatial": "spatial", "gbdt_spatiotemporal": "spatiotemporal"}.get(scenario)


def _fit_fold(job):
    fold, X_train, y_train, X_test, params, n_classes, columns = job
    if len(np.unique(y_train)) < 2:
        raise ValueError(f"fold {fold}: training labels contain a single class")
    model = train_gbdt(X_train, y_train, params, n_classes=n_classes, columns=columns)
    return model.predict_proba(X_test, columns)


def run_scenario(
    samples: Sequence[UserLocationSample],
    scenario: str,
    policy: ObfuscationPolicy,
    plan: SplitPlan,
    ctx: PoiContext | None,
    categories: Sequence[str] | None = None,
    params: GbdtParams | None = None,
    k: int = 20,
    r_f: float = 200.0,
    seed: int = 0,
    features: FeatureMatrix | None = None,
    workers: int | None = None,
) -> EvaluationReport:
    """Train on every fold's complement, predict the fold, and pool the test predictions."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    categories = list(categories if categories is not None else ctx.categories)
    n_classes = len(categories)
    code = {c: i for i, c in enumerate(categories)}
    y = np.array([code[s.true_category] for s in samples], dtype=np.int64)
    keys = [s.sample_id for s in samples]
    n = len(samples)
    y_pred = np.full(n, -1, dtype=np.int64)
    proba = np.zeros((n, n_classes))
    radius_used = np.zeros(n)
    fold_ids = [int(f) for f in np.unique(plan.folds)]

    if scenario == "uninformed":
        for f in fold_ids:
            test = plan.folds == f
            train_y = y[~test]
            if len(np.unique(train_y)) < 2:
                raise ValueError(f"fold {f}: training labels contain a single class")
            base = ClassFrequencyBaseline.fit(train_y, n_classes)
            rng = np.random.default_rng(np.random.SeedSequence([seed, f]))
            y_pred[test] = base.predict(int(test.sum()), rng)
            proba[test] = base.probabilities
    elif scenario == "spatial_join":
        if ctx is None:
            raise ValueError("spatial join needs a POI context")
        xy = ctx.local_xy([s.geo for s in samples])
        masked, radius_used = obfuscate_samples(xy, keys, policy, ctx.index)
        y_pred = spatial_join_codes(masked, ctx)
        proba[np.arange(n), y_pred] = 1.0
    else:
        mode = _feature_mode(scenario)
        fm = features if features is not None else featurize(samples, mode, ctx, policy, categories, k, r_f)
        if features is not None and fm.columns != feature_columns(mode, categories):
            raise ValueError("precomputed features do not match the scenario")
        radius_used = fm.radius_used
        jobs = []
        for f in fold_ids:
            test = plan.folds == f
            jobs.append((f, fm.X[~test], y[~test], fm.X[test], params, n_classes, fm.columns))
        for f, p in zip(fold_ids, parallel_map(_fit_fold, jobs, workers)):
            test = plan.folds == f
            proba[test] = p
            y_pred[test] = p.argmax(axis=1)

    radius = policy.radius if policy.mode == "fixed" else float(radius_used.mean()) if n else 0.0
    return EvaluationReport(
        scenario=scenario,
        policy=policy.label,
        radius=float(radius),
        categories=categories,
        keys=keys,
        user_ids=[s.user_id for s in samples],
        weights=np.array([s.n_visits for s in samples], dtype=float),
        y_true=y,
        y_pred=y_pred,
        proba=proba,
        folds=plan.folds.copy(),
        radius_used=np.asarray(radius_used, dtype=float),
    )


# -- POI density -----------------------------------------------------------------

@dataclass
class DensityTable:
    rows: list[dict]
    mean_density_correct: float
    mean_density_incorrect: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "n_samples", "accuracy", "mean_density"])
            for r in self.rows:
                w.writerow([r["bin_lo"], r["bin_hi"], r["n_samples"], repr(r["accuracy"]), repr(r["mean_density"])])


def density_stratified_accuracy(
    report: EvaluationReport,
    samples: Sequence[UserLocationSample],
    ctx: PoiContext,
    radius: float = 200.0,
    edges: Sequence[float] = DEFAULT_DENSITY_EDGES,
) -> DensityTable:
    """Accuracy by number of POIs within `radius` of the true (unmasked) location.

    Bins are ``[lo, hi)``; bins without samples are left out of the table.
    """
    edges = np.asarray(edges, dtype=float)
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    density = ctx.index.radius_counts(ctx.local_xy([s.geo for s in samples]), radius).astype(float)
    correct = report.correct
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        m = (density >= lo) & (density < hi)
        if not m.any():
            continue
        rows.append({
            "bin_lo": float(lo), "bin_hi": float(hi), "n_samples": int(m.sum()),
            "accuracy": float(correct[m].mean()), "mean_density": float(density[m].mean()),
        })
    mean_c = float(density[correct].mean()) if correct.any() else float("nan")
    mean_i = float(density[~correct].mean()) if (~correct).any() else float("nan")
    return DensityTable(rows, mean_c, mean_i)
