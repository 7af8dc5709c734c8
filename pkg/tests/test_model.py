import numpy as np
import pytest

from placeprivacy.geo import GeoPoint, LocalPoint, unproject_arrays
from placeprivacy.ingest import Poi
from placeprivacy.features import PoiContext
from placeprivacy.model import (
    ClassFrequencyBaseline,
    GbdtModel,
    GbdtParams,
    log_loss,
    softmax,
    spatial_join_codes,
    spatial_join_predict,
    train_gbdt,
    uninformed_predict,
)


def two_clusters(n=200, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    X = rng.normal(0, 0.5, (n, 2)) + np.where(y[:, None] == 0, -3.0, 3.0)
    return X, y


def brute_tree(X, g, h, rows, depth, max_depth, min_leaf, lam):
    """Exhaustive exact-greedy split search on one node, recursively."""
    G, H = g[rows].sum(), h[rows].sum()
    node = {"G": G, "H": H}
    if depth == max_depth or len(rows) < 2 * min_leaf:
        return node
    best = (0.0, None, None)
    for f in range(X.shape[1]):
        vals = np.unique(X[rows, f])
        for a, b in zip(vals[:-1], vals[1:]):
            thr = 0.5 * (a + b)
            lm = X[rows, f] <= thr
            if lm.sum() < min_leaf or (~lm).sum() < min_leaf:
                continue
            gl, hl = g[rows][lm].sum(), h[rows][lm].sum()
            gr, hr = G - gl, H - hl
            gain = 0.5 * (gl**2 / (hl + lam) + gr**2 / (hr + lam) - G**2 / (H + lam))
            if gain > best[0] * (1 + 1e-10):  # near-equal gains are ties
                best = (gain, f, thr)
    if best[1] is None:
        return node
    gain, f, thr = best
    lm = X[rows, f] <= thr
    node.update(gain=gain, feature=f, threshold=thr,
                left=brute_tree(X, g, h, rows[lm], depth + 1, max_depth, min_leaf, lam),
                right=brute_tree(X, g, h, rows[~lm], depth + 1, max_depth, min_leaf, lam))
    return node


def compare(tree, j, node, lam, lr):
    if "feature" not in node:
        assert tree.left[j] == -1
        assert tree.value[j] == pytest.approx(-lr * node["G"] / (node["H"] + lam), abs=1e-10)
        return 1
    assert tree.feature[j] == node["feature"]
    assert tree.threshold[j] == pytest.approx(node["threshold"], abs=1e-12)
    assert tree.gain[j] == pytest.approx(node["gain"], abs=1e-8)
    return 1 + compare(tree, tree.left[j], node["left"], lam, lr) + compare(tree, tree.right[j], node["right"], lam, lr)


class TestSplits:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_first_tree_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(50, 4))
        X[:, 3] = rng.integers(0, 3, 50)  # a feature with repeated values
        y = rng.integers(0, 3, 50)
        p = GbdtParams(n_rounds=1, max_depth=3, min_samples_leaf=3, reg_lambda=1.0, learning_rate=0.3)
        model = train_gbdt(X, y, p, n_classes=3)
        g = 1 / 3 - np.eye(3)[y]
        h = np.full(50, (1 / 3) * (2 / 3))
        for c in range(3):
            want = brute_tree(X, g[:, c], h, np.arange(50), 0, 3, 3, 1.0)
            n_nodes = compare(model.trees[0][c], 0, want, 1.0, 0.3)
            assert n_nodes == len(model.trees[0][c].left)

    def test_rows_at_threshold_go_left(self):
        X = np.array([[0.0], [0.0], [1.0], [1.0]])
        model = train_gbdt(X, np.array([0, 0, 1, 1]), GbdtParams(n_rounds=1, min_samples_leaf=1))
        t = model.trees[0][0]
        assert t.threshold[0] == 0.5
        assert np.array_equal(model.predict(np.array([[0.5], [0.5000001]])), [0, 1])

    def test_ties_prefer_lowest_feature(self):
        # two identical features give identical gains; feature 0 must win
        rng = np.random.default_rng(3)
        x = rng.normal(size=40)
        X = np.column_stack([x, x])
        y = (x > 0).astype(int)
        model = train_gbdt(X, y, GbdtParams(n_rounds=2, min_samples_leaf=2))
        assert all(t.feature[0] == 0 for rt in model.trees for t in rt)


class TestTraining:
    def test_separable_clusters(self):
        X, y = two_clusters()
        model = train_gbdt(X, y, GbdtParams(n_rounds=50))
        assert np.mean(model.predict(X) == y) == 1.0
        centers = model.predict_proba(np.array([[-3.0, -3.0], [3.0, 3.0]]))
        assert centers[0, 0] >= 0.95 and centers[1, 1] >= 0.95

    def test_loss_decreases(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(300, 5))
        y = (X[:, 0] + rng.normal(0, 0.5, 300) > 0).astype(int) + (X[:, 1] > 1)
        model = train_gbdt(X, y, GbdtParams(n_rounds=10, max_depth=3))
        assert model.train_loss[10] <= model.train_loss[1] <= model.train_loss[0]
        assert model.train_loss[-1] == pytest.approx(log_loss(model.predict_proba(X), y))

    def test_zero_rounds_uniform(self):
        X, y = two_clusters(20)
        model = train_gbdt(X, y, GbdtParams(n_rounds=0), n_classes=4)
        np.testing.assert_array_equal(model.predict_proba(X), np.full((20, 4), 0.25))

    def test_constant_features_give_class_frequencies(self):
        rng = np.random.default_rng(0)
        y = rng.choice(3, 200, p=[0.5, 0.3, 0.2])
        X = np.ones((200, 2))
        model = train_gbdt(X, y, GbdtParams(), n_classes=3)
        np.testing.assert_allclose(model.predict_proba(X[:3]), np.tile(np.bincount(y) / 200, (3, 1)), atol=1e-6)

    def test_row_order_invariance(self):
        rng = np.random.default_rng(2)
        X = np.round(rng.normal(size=(150, 4)), 1)  # rounding creates many ties
        y = rng.integers(0, 4, 150)
        p = GbdtParams(n_rounds=8, max_depth=4)
        a = train_gbdt(X, y, p, n_classes=4)
        perm = rng.permutation(150)
        b = train_gbdt(X[perm], y[perm], p, n_classes=4)
        Q = rng.normal(size=(40, 4))
        assert np.array_equal(a.predict_proba(Q), b.predict_proba(Q))

    def test_proba_rows(self):
        X, y = two_clusters()
        model = train_gbdt(X, y, GbdtParams(n_rounds=5))
        Q = np.random.default_rng(4).normal(0, 5, (500, 2))
        P = model.predict_proba(Q)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)
        assert np.array_equal(model.predict(Q), P.argmax(axis=1))
        twice = model.predict_proba(np.vstack([Q[:1], Q[:1]]))
        assert np.array_equal(twice[0], twice[1])

    def test_input_validation(self):
        X, y = two_clusters(20)
        with pytest.raises(ValueError, match="single class"):
            train_gbdt(X, np.zeros(20, int))
        bad = X.copy()
        bad[0, 0] = np.nan
        with pytest.raises(ValueError, match="NaN"):
            train_gbdt(bad, y)
        with pytest.raises(ValueError):
            GbdtParams(learning_rate=0)
        with pytest.raises(ValueError):
            GbdtParams(min_samples_leaf=0)

    def test_softmax_stable(self):
        p = softmax(np.array([[1000.0, 0.0], [-1000.0, -1000.0]]))
        np.testing.assert_allclose(p, [[1.0, 0.0], [0.5, 0.5]])


class TestSerialization:
    def test_json_round_trip(self, tmp_path):
        X, y = two_clusters()
        model = train_gbdt(X, y, GbdtParams(n_rounds=4, max_depth=3), columns=["a", "b"])
        model.save(tmp_path / "m.json")
        loaded = GbdtModel.load(tmp_path / "m.json")
        assert loaded.params == model.params and loaded.columns == ["a", "b"]
        assert np.array_equal(loaded.predict_proba(X), model.predict_proba(X))

    def test_rejects_foreign_json(self):
        with pytest.raises(ValueError):
            GbdtModel.from_json('{"format": "other", "version": 1}')

    def test_schema_check(self):
        X, y = two_clusters()
        model = train_gbdt(X, y, GbdtParams(n_rounds=1), columns=["a", "b"])
        with pytest.raises(ValueError, match="schema"):
            model.predict_proba(X, columns=["b", "a"])
        with pytest.raises(ValueError):
            model.predict_proba(X[:, :1])


class TestBaselines:
    def test_single_class(self):
        base = ClassFrequencyBaseline.fit([0, 0, 0], 3)
        labels, proba = uninformed_predict(base, 10, np.random.default_rng(0))
        assert np.all(labels == 0)
        np.testing.assert_array_equal(proba, np.tile([1.0, 0.0, 0.0], (10, 1)))

    def test_uniform_draws(self):
        base = ClassFrequencyBaseline.fit(np.arange(12), 12)
        counts = np.bincount(base.predict(12000, np.random.default_rng(0)), minlength=12)
        assert np.all(np.abs(counts - 1000) <= 150)

    def test_expected_accuracy(self):
        f = np.array([0.5, 0.3, 0.2])
        rng = np.random.default_rng(1)
        y = rng.choice(3, 200_000, p=f)
        base = ClassFrequencyBaseline(f)
        acc = np.mean(base.predict(len(y), rng) == y)
        assert acc == pytest.approx(np.sum(f**2), abs=0.005)


class TestSpatialJoin:
    def ctx(self, offsets, cats, ids):
        anchor = GeoPoint(40.0, -74.0)
        xy = np.asarray(offsets, dtype=float)
        lat, lon = unproject_arrays(anchor, xy[:, 0], xy[:, 1])
        pois = [Poi(i, GeoPoint(float(a), float(b)), c) for i, a, b, c in zip(ids, lat, lon, cats)]
        return PoiContext(pois, ("Dining", "Retail"), anchor)

    def test_nearest(self):
        ctx = self.ctx([[10, 0], [0, 20]], ["Dining", "Retail"], ["a", "b"])
        assert spatial_join_predict(LocalPoint(0, 0), ctx) == "Dining"

    def test_tie_lowest_id(self):
        ctx = self.ctx([[10, 0], [-10, 0]], ["Retail", "Dining"], ["b", "a"])
        assert spatial_join_predict(LocalPoint(0, 0), ctx) == "Dining"
        ctx = self.ctx([[10, 0], [-10, 0]], ["Retail", "Dining"], ["a", "b"])
        assert spatial_join_predict(LocalPoint(0, 0), ctx) == "Retail"

    def test_exact_locations(self, small_city):
        ctx = small_city.ctx
        codes = spatial_join_codes(ctx.index.xy, ctx)
        assert np.array_equal(codes, ctx.codes)
