"""Attack classifiers: multiclass gradient-boosted trees and two baselines.

The booster is a second-order (Newton) softmax booster: every round fits one
regression tree per class to the log-loss gradient ``g = p - 1[y == c]`` with
hessian ``h = p (1 - p)``, using exact greedy split search over all features.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from .features import PoiContext, check_schema

FORMAT_NAME = "placeprivacy-gbdt"
FORMAT_VERSION = 1
# gains closer than this (relative) count as ties, so summation noise cannot
# override the lowest-feature / lowest-threshold preference
GAIN_RTOL = 1e-10


@dataclass(frozen=True)
class GbdtParams:
    learning_rate: float = 0.3
    n_rounds: int = 100
    max_depth: int = 10
    min_samples_leaf: int = 5
    reg_lambda: float = 1.0

    def __post_init__(self):
        if self.n_rounds < 0 or self.max_depth < 0 or self.min_samples_leaf < 1:
            raise ValueError(f"invalid booster parameters: {self}")
        if not self.learning_rate > 0 or self.reg_lambda < 0:
            raise ValueError(f"invalid booster parameters: {self}")


@dataclass
class Tree:
    """Flat binary tree; ``left == -1`` marks a leaf. Rows with ``x <= threshold`` go left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        return _predict_tree(X, self.feature, self.threshold, self.left, self.right, self.value)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value", "gain")}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        ints = ("feature", "left", "right")
        return cls(**{k: np.asarray(v, dtype=np.int64 if k in ints else float) for k, v in d.items()})


@njit(cache=True)
def _predict_tree(X, feature, threshold, left, right, value):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        node = 0
        while left[node] != -1:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@njit(cache=True)
def _split_gain(gl, hl, gr, hr, lam):
    g = gl + gr
    h = hl + hr
    return 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - g * g / (h + lam))


@njit(cache=True)
def _grow_tree(X, order, g, h, max_depth, min_leaf, lam, learning_rate):
    """Exact greedy, level-wise tree growth.

    `order[f]` lists row indices sorted by feature f. All nodes of one level
    are scanned together in a single pass per feature. Returns the flat tree
    arrays plus the leaf each training row ends in.
    """
    n, n_feat = X.shape
    cap = 2 ** (max_depth + 1) - 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    gain = np.zeros(cap)
    node_g = np.zeros(cap)
    node_h = np.zeros(cap)
    node_n = np.zeros(cap, np.int64)
    node_of = np.zeros(n, np.int64)

    for i in range(n):
        node_g[0] += g[i]
        node_h[0] += h[i]
    node_n[0] = n
    n_nodes = 1
    level = np.zeros(1, np.int64)

    for depth in range(max_depth):
        n_level = level.shape[0]
        slot = np.full(n_nodes, -1, np.int64)
        any_open = False
        for s in range(n_level):
            if node_n[level[s]] >= 2 * min_leaf:
                slot[level[s]] = s
                any_open = True
        if not any_open:
            break
        best_gain = np.zeros(n_level)
        best_feat = np.full(n_level, -1, np.int64)
        best_thr = np.zeros(n_level)
        for f in range(n_feat):
            run_g = np.zeros(n_level)
            run_h = np.zeros(n_level)
            run_n = np.zeros(n_level, np.int64)
            last = np.zeros(n_level)
            for t in range(n):
                i = order[f, t]
                s = slot[node_of[i]]
                if s < 0:
                    continue
                x = X[i, f]
                j = level[s]
                if run_n[s] >= min_leaf and x > last[s] and node_n[j] - run_n[s] >= min_leaf:
                    gv = _split_gain(run_g[s], run_h[s], node_g[j] - run_g[s], node_h[j] - run_h[s], lam)
                    if gv > best_gain[s] * (1.0 + GAIN_RTOL):
                        best_gain[s] = gv
                        best_feat[s] = f
                        mid = 0.5 * (last[s] + x)
                        if not (mid >= last[s] and mid < x):
                            mid = last[s]
                        best_thr[s] = mid
                run_g[s] += g[i]
                run_h[s] += h[i]
                run_n[s] += 1
                last[s] = x

        n_split = 0
        for s in range(n_level):
            if best_feat[s] >= 0:
                n_split += 1
        if n_split == 0:
            break
        next_level = np.empty(2 * n_split, np.int64)
        child_of = np.full(n_nodes, -1, np.int64)
        q = 0
        for s in range(n_level):
            if best_feat[s] < 0:
                continue
            j = level[s]
            feature[j] = best_feat[s]
            threshold[j] = best_thr[s]
            gain[j] = best_gain[s]
            left[j] = n_nodes
            right[j] = n_nodes + 1
            child_of[j] = n_nodes
            next_level[q] = n_nodes
            next_level[q + 1] = n_nodes + 1
            q += 2
            n_nodes += 2
        for i in range(n):
            j = node_of[i]
            if j < child_of.shape[0] and child_of[j] >= 0:
                c = child_of[j] if X[i, feature[j]] <= threshold[j] else child_of[j] + 1
                node_of[i] = c
                node_g[c] += g[i]
                node_h[c] += h[i]
                node_n[c] += 1
        level = next_level

    for j in range(n_nodes):
        if left[j] == -1:
            value[j] = -learning_rate * node_g[j] / (node_h[j] + lam)
    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes],
            value[:n_nodes], gain[:n_nodes], node_of)


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_loss(proba: np.ndarray, y: np.ndarray) -> float:
    return float(-np.mean(np.log(np.clip(proba[np.arange(len(y)), y], 1e-300, None))))


@dataclass
class GbdtModel:
    params: GbdtParams
    n_classes: int
    columns: list[str]
    trees: list[list[Tree]] = field(default_factory=list)  # [round][class]
    train_loss: list[float] = field(default_factory=list)

    def decision_function(self, X) -> np.ndarray:
        X = self._check_X(X)
        scores = np.zeros((X.shape[0], self.n_classes))
        for round_trees in self.trees:
            for c, tree in enumerate(round_trees):
                scores[:, c] += tree.predict(X)
        return scores

    def predict_proba(self, X, columns: Sequence[str] | None = None) -> np.ndarray:
        if columns is not None:
            check_schema(self.columns, columns)
        return softmax(self.decision_function(X))

    def predict(self, X, columns: Sequence[str] | None = None) -> np.ndarray:
        # argmax returns the first maximum, i.e. the lowest class index on ties
        return self.predict_proba(X, columns).argmax(axis=1)

    def _check_X(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.columns):
            raise ValueError(f"expected {len(self.columns)} feature columns, got shape {X.shape}")
        return X

    def to_json(self) -> str:
        return json.dumps({
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "params": asdict(self.params),
            "n_classes": self.n_classes,
            "columns": self.columns,
            "train_loss": self.train_loss,
            "trees": [[t.to_dict() for t in rt] for rt in self.trees],
        })

    @classmethod
    def from_json(cls, text: str) -> "GbdtModel":
        d = json.loads(text)
        if d.get("format") != FORMAT_NAME or d.get("version") != FORMAT_VERSION:
            raise ValueError("not a serialized GbdtModel of a supported version")
        return cls(
            GbdtParams(**d["params"]), d["n_classes"], d["columns"],
            [[Tree.from_dict(t) for t in rt] for rt in d["trees"]], d["train_loss"],
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "GbdtModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def train_gbdt(X, y, params: GbdtParams | None = None, n_classes: int | None = None,
               columns: Sequence[str] | None = None) -> GbdtModel:
    params = params or GbdtParams()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be 2-D with one row per label")
    if np.isnan(X).any() or not np.isfinite(X).all():
        raise ValueError("features contain NaN or infinite values")
    if len(np.unique(y)) < 2:
        raise ValueError("training labels contain a single class")
    n_classes = int(n_classes if n_classes is not None else y.max() + 1)
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError("labels out of range")
    columns = list(columns) if columns is not None else [f"f{i}" for i in range(X.shape[1])]
    if len(columns) != X.shape[1]:
        raise ValueError("column names do not match X")

    # canonical row order makes the fit independent of the input row order
    canon = np.lexsort((y, *X.T[::-1]))
    X = np.ascontiguousarray(X[canon])
    y = y[canon]
    order = np.ascontiguousarray(np.stack([np.argsort(X[:, f], kind="stable") for f in range(X.shape[1])])
                                 if X.shape[1] else np.empty((0, len(y)), np.int64))
    onehot = np.zeros((len(y), n_classes))
    onehot[np.arange(len(y)), y] = 1.0

    model = GbdtModel(params, n_classes, columns)
    scores = np.zeros((len(y), n_classes))
    proba = softmax(scores)
    model.train_loss.append(log_loss(proba, y))
    for _ in range(params.n_rounds):
        round_trees = []
        grad = proba - onehot
        hess = proba * (1.0 - proba)
        for c in range(n_classes):
            *arrays, leaf_of = _grow_tree(
                X, order, np.ascontiguousarray(grad[:, c]), np.ascontiguousarray(hess[:, c]),
                params.max_depth, params.min_samples_leaf, params.reg_lambda, params.learning_rate,
            )
            tree = Tree(*arrays)
            scores[:, c] += tree.value[leaf_of]
            round_trees.append(tree)
        model.trees.append(round_trees)
        proba = softmax(scores)
        model.train_loss.append(log_loss(proba, y))
    return model


def predict_proba(model: GbdtModel, X, columns: Sequence[str] | None = None) -> np.ndarray:
    return model.predict_proba(X, columns)


# -- baselines -------------------------------------------------------------------

@dataclass
class ClassFrequencyBaseline:
    """Uninformed attacker drawing labels from the training class frequencies."""

    probabilities: np.ndarray

    @classmethod
    def fit(cls, y, n_classes: int) -> "ClassFrequencyBaseline":
        counts = np.bincount(np.asarray(y, dtype=np.int64), minlength=n_classes).astype(float)
        if counts.sum() == 0:
            raise ValueError("no training labels")
        return cls(counts / counts.sum())

    def predict(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(len(self.probabilities), size=n, p=self.probabilities)

    def predict_proba(self, n: int) -> np.ndarray:
        return np.tile(self.probabilities, (n, 1))


def uninformed_predict(baseline: ClassFrequencyBaseline, n: int, rng: np.random.Generator):
    return baseline.predict(n, rng), baseline.predict_proba(n)


def spatial_join_codes(xy: np.ndarray, ctx: PoiContext) -> np.ndarray:
    """Category code of the nearest POI for each row (ties to the lowest POI id)."""
    pos, _ = ctx.index.knn_positions(xy, 1)
    return ctx.codes[pos[:, 0]]


def spatial_join_predict(p_obf, ctx: PoiContext) -> str:
    return ctx.categories[int(spatial_join_codes(np.array([[p_obf.x, p_obf.y]]), ctx)[0])]
