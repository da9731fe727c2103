from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pfnlab import baselines as B
from pfnlab.errors import ContractError


# ---------------------------------------------------------------------------
# independent oracles


def knn_oracle(X, y, Q, k):
    out = []
    for q in Q:
        dist = [sum((float(a) - float(b)) ** 2 for a, b in zip(q, x)) for x in X]
        nearest = sorted(range(len(X)), key=lambda i: (dist[i], i))[:k]
        votes = Counter(int(y[i]) for i in nearest)
        top = max(votes.values())
        out.append(min(c for c, v in votes.items() if v == top))
    return np.array(out)


def gini_cost(y_left, y_right):
    """Weighted Gini impurity of a split, as an exact fraction."""
    def gini(labels):
        n = len(labels)
        return 1 - sum(Fraction(c, n) ** 2 for c in Counter(labels).values())
    n = len(y_left) + len(y_right)
    return Fraction(len(y_left), n) * gini(y_left) + Fraction(len(y_right), n) * gini(y_right)


def exhaustive_split(X, y, min_leaf):
    """(cost, feature, threshold) of the best split, lowest feature/threshold on ties."""
    best = None
    for j in range(X.shape[1]):
        values = sorted(set(X[:, j].tolist()))
        for lo, hi in zip(values, values[1:]):
            thr = 0.5 * (lo + hi)
            if not thr < hi:
                thr = lo
            mask = X[:, j] <= thr
            if mask.sum() < min_leaf or (~mask).sum() < min_leaf:
                continue
            cost = gini_cost(y[mask].tolist(), y[~mask].tolist())
            if best is None or cost < best[0]:
                best = (cost, j, thr)
    return best


def majority(y, C):
    return int(np.argmax(np.bincount(y, minlength=C)))


def tree_oracle(X, y, params, C, depth=0):
    if len(set(y.tolist())) < 2 or depth >= params.max_depth or len(y) < params.min_samples_split:
        return majority(y, C)
    split = exhaustive_split(X, y, params.min_samples_leaf)
    if split is None:
        return majority(y, C)
    _, j, thr = split
    m = X[:, j] <= thr
    return (j, thr, tree_oracle(X[m], y[m], params, C, depth + 1), tree_oracle(X[~m], y[~m], params, C, depth + 1))


def oracle_predict(node, x):
    while isinstance(node, tuple):
        j, thr, left, right = node
        node = left if x[j] <= thr else right
    return node


def random_instance(rng, n, d, C, integer):
    if integer:
        X = rng.integers(0, 4, (n, d)).astype(float)
    else:
        X = np.round(rng.standard_normal((n, d)), 3)
    return X, rng.integers(0, C, n)


# ---------------------------------------------------------------------------


class TestKnn:
    def test_query_equals_training_point(self):
        X = np.array([[0.0, 0.0], [1.0, 1.0], [5.0, 5.0]])
        assert B.knn_predict(X, [0, 1, 2], X[[1]], B.KnnParams(1))[0] == 1

    def test_k_equals_n_majority(self):
        X = np.arange(5.0)[:, None]
        assert B.knn_predict(X, [1, 1, 1, 0, 0], np.array([[100.0]]), B.KnnParams(5))[0] == 1

    def test_vote_tie_goes_to_lowest_class(self):
        X = np.array([[-1.0], [1.0]])
        assert B.knn_predict(X, [1, 0], np.array([[0.0]]), B.KnnParams(2))[0] == 0

    def test_distance_tie_goes_to_lowest_row(self):
        X = np.array([[-1.0], [1.0]])
        assert B.knn_predict(X, [1, 0], np.array([[0.0]]), B.KnnParams(1))[0] == 1

    def test_k_too_large(self):
        with pytest.raises(ContractError):
            B.knn_predict(np.zeros((3, 1)), [0, 1, 0], np.zeros((1, 1)), B.KnnParams(4))
        with pytest.raises(ContractError):
            B.KnnParams(0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for trial in range(40):
            n = int(rng.integers(1, 201))
            d, C = int(rng.integers(1, 5)), int(rng.integers(2, 5))
            X, y = random_instance(rng, n, d, C, integer=trial % 2 == 0)
            Q, _ = random_instance(rng, 200 if trial < 4 else 30, d, C, integer=trial % 2 == 0)
            k = int(rng.integers(1, n + 1))
            np.testing.assert_array_equal(B.knn_predict(X, y, Q, B.KnnParams(k), C), knn_oracle(X, y, Q, k))

    def test_chunking_is_invisible(self):
        rng = np.random.default_rng(1)
        X, Q = rng.standard_normal((50, 3)), rng.standard_normal((600, 3))
        full = B.neighbor_order(X, Q, 7)
        np.testing.assert_array_equal(full[300:310], B.neighbor_order(X, Q[300:310], 7))


class TestTree:
    def test_pure_dataset_single_leaf(self):
        X = np.random.default_rng(2).standard_normal((10, 3))
        tree = B.tree_fit(X, np.ones(10, int), n_classes=2)
        assert tree.n_nodes == 1
        np.testing.assert_array_equal(B.tree_predict(tree, X), 1)

    def test_one_dimensional_split(self):
        X = np.array([[0.0], [1.0], [2.0], [3.0]])
        tree = B.tree_fit(X, [0, 0, 1, 1])
        assert 1 < tree.threshold[0] < 2
        np.testing.assert_array_equal(B.tree_predict(tree, X), [0, 0, 1, 1])

    def test_feature_tie_breaks_low(self):
        X = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        assert B.tree_fit(X, [0, 0, 1, 1]).feature[0] == 0

    def test_threshold_tie_breaks_low(self):
        # splitting after row 1 or after row 3 both isolate one pure pair
        X = np.arange(6.0)[:, None]
        tree = B.tree_fit(X, [0, 0, 1, 1, 0, 0], B.TreeParams(max_depth=1))
        assert tree.threshold[0] == 1.5

    def test_node_impurity_matches_exhaustive_search(self):
        rng = np.random.default_rng(3)
        for trial in range(10):
            X, y = random_instance(rng, 30, 3, 3, integer=trial % 2 == 1)
            tree = B.tree_fit(X, y, B.TreeParams(max_depth=2), n_classes=3)
            stack = [(0, np.arange(30))]
            while stack:
                node, idx = stack.pop()
                if tree.feature[node] < 0:
                    continue
                j, thr = tree.feature[node], tree.threshold[node]
                m = X[idx, j] <= thr
                cost, bj, bthr = exhaustive_split(X[idx], y[idx], 1)
                assert gini_cost(y[idx][m].tolist(), y[idx][~m].tolist()) == cost
                assert (j, thr) == (bj, bthr)
                stack += [(tree.left[node], idx[m]), (tree.right[node], idx[~m])]

    def test_matches_recursive_oracle(self):
        rng = np.random.default_rng(4)
        for trial in range(30):
            n = int(rng.integers(2, 201 if trial < 6 else 60))
            d, C = int(rng.integers(1, 4)), int(rng.integers(2, 4))
            X, y = random_instance(rng, n, d, C, integer=trial % 3 == 0)
            params = B.TreeParams(int(rng.integers(1, 8)), int(rng.integers(2, 8)), int(rng.integers(1, 5)))
            root = tree_oracle(X, y, params, C)
            Q, _ = random_instance(rng, 100, d, C, integer=trial % 3 == 0)
            expect = np.array([oracle_predict(root, q) for q in np.vstack([X, Q])])
            got = B.tree_predict(B.tree_fit(X, y, params, C), np.vstack([X, Q]))
            np.testing.assert_array_equal(got, expect)

    @given(st.integers(0, 2**32))
    def test_pruned_full_tree_equals_direct_fit(self, seed):
        rng = np.random.default_rng(seed)
        X, y = random_instance(rng, int(rng.integers(5, 80)), 2, 3, integer=bool(seed % 2))
        leaf = int(rng.integers(1, 5))
        full = B.tree_fit(X, y, B.TreeParams(min_samples_leaf=leaf), 3, grow_full=True)
        params = B.TreeParams(int(rng.integers(1, 6)), int(rng.integers(2, 12)), leaf)
        Q = rng.standard_normal((40, 2)) * 2
        np.testing.assert_array_equal(B.tree_predict(full, Q, params),
                                      B.tree_predict(B.tree_fit(X, y, params, 3), Q))

    def test_min_leaf_respected(self):
        rng = np.random.default_rng(5)
        X, y = random_instance(rng, 100, 3, 2, integer=False)
        tree = B.tree_fit(X, y, B.TreeParams(min_samples_leaf=7))
        assert tree.n_samples[tree.feature < 0].min() >= 7

    def test_invalid_params(self):
        for kw in (dict(max_depth=0), dict(min_samples_split=1), dict(min_samples_leaf=0)):
            with pytest.raises(ContractError):
                B.TreeParams(**kw)
        with pytest.raises(ContractError):
            B.tree_fit(np.zeros((0, 2)), np.zeros(0, int))


class TestTune:
    def blobs(self, n=60, seed=6):
        rng = np.random.default_rng(seed)
        y = np.arange(n) % 2
        return rng.standard_normal((n, 2)) * 0.1 + 10 * y[:, None], y

    def test_budget_one(self):
        X, y = self.blobs()
        for family in ("knn", "tree"):
            res = B.tune(family, X, y, B.TuneBudget(max_configs=1, seed=3))
            assert res.n_evaluated == 1 and res.params == res.history[0][0]

    def test_separable_scores_one(self):
        X, y = self.blobs()
        res = B.tune("knn", X, y, B.TuneBudget(seed=0))
        assert res.cv_score == 1.0
        assert B.tune("tree", X, y, B.TuneBudget(seed=0)).cv_score == 1.0

    def test_deterministic(self):
        rng = np.random.default_rng(7)
        X, y = rng.standard_normal((80, 3)), rng.integers(0, 3, 80)
        for family in ("knn", "tree"):
            a = B.tune(family, X, y, B.TuneBudget(seed=11))
            b = B.tune(family, X, y, B.TuneBudget(seed=11))
            assert a.params == b.params and a.cv_score == b.cv_score and a.history == b.history

    def test_first_best_wins(self):
        rng = np.random.default_rng(8)
        X, y = rng.standard_normal((50, 2)), rng.integers(0, 2, 50)
        res = B.tune("tree", X, y, B.TuneBudget(seed=1))
        scores = [s for _, s in res.history]
        assert res.params == res.history[scores.index(max(scores))][0]

    def test_ranges(self):
        rng = np.random.default_rng(9)
        X, y = rng.standard_normal((40, 2)), rng.integers(0, 2, 40)
        knn = B.tune("knn", X, y, B.TuneBudget(seed=2))
        assert all(1 <= p.k <= min(50, 32) for p, _ in knn.history)
        tree = B.tune("tree", X, y, B.TuneBudget(seed=2))
        for p, _ in tree.history:
            assert 1 <= p.max_depth <= 20 and 2 <= p.min_samples_split <= 20 and 1 <= p.min_samples_leaf <= 10
        assert len(set(p for p, _ in tree.history)) == len(tree.history)

    def test_stratified_folds(self):
        y = np.array([0] * 23 + [1] * 12 + [2] * 5)
        folds, strat = B.make_folds(y, 5, np.random.default_rng(0))
        assert strat
        for tr, va in folds:
            assert len(np.intersect1d(tr, va)) == 0 and len(tr) + len(va) == 40
            assert np.bincount(y[va], minlength=3).min() >= 1
        np.testing.assert_array_equal(np.sort(np.concatenate([va for _, va in folds])), np.arange(40))

    def test_unstratified_fallback(self):
        rng = np.random.default_rng(10)
        y = np.array([0] * 20 + [1] * 3)
        res = B.tune("knn", rng.standard_normal((23, 2)), y, B.TuneBudget(seed=0))
        assert not res.stratified
        with pytest.raises(ContractError):
            B.make_folds(np.zeros(3, int), 5, rng)

    @pytest.mark.parametrize("family", ["knn", "tree"])
    def test_no_validation_rows_in_fits(self, family, monkeypatch):
        rng = np.random.default_rng(12)
        n = 70
        X = np.column_stack([np.arange(n, dtype=float), rng.standard_normal((n, 2))])  # column 0 = row id
        y = rng.integers(0, 2, n)
        seen = []
        real_order, real_fit, real_predict = B.neighbor_order, B.tree_fit, B.tree_predict

        def spy_order(Xt, Xq, k):
            seen.append((set(Xt[:, 0].astype(int)), set(Xq[:, 0].astype(int))))
            return real_order(Xt, Xq, k)

        fits = []

        def spy_fit(Xt, yt, *a, **kw):
            tree = real_fit(Xt, yt, *a, **kw)
            fits.append((id(tree), set(Xt[:, 0].astype(int))))
            return tree

        def spy_predict(tree, Xq, params=None):
            rows = dict(fits)[id(tree)]
            seen.append((rows, set(Xq[:, 0].astype(int))))
            return real_predict(tree, Xq, params)

        monkeypatch.setattr(B, "neighbor_order", spy_order)
        monkeypatch.setattr(B, "tree_fit", spy_fit)
        monkeypatch.setattr(B, "tree_predict", spy_predict)
        res = B.tune(family, X, y, B.TuneBudget(seed=4))
        fold_pairs = {(frozenset(tr), frozenset(va)) for tr, va in res.folds}
        assert seen
        for train_rows, val_rows in seen:
            assert not train_rows & val_rows
            assert (frozenset(train_rows), frozenset(val_rows)) in fold_pairs


class TestMethods:
    @pytest.mark.parametrize("cls", [B.KnnMethod, B.TreeMethod])
    def test_fit_predict(self, cls):
        rng = np.random.default_rng(13)
        X = rng.standard_normal((60, 2))
        y = (X[:, 0] > 0).astype(int)
        m = cls(B.TuneBudget(max_configs=10))
        assert m.fit(X, y, 2, seed=1) >= 0
        assert np.mean(m.predict(X) == y) > 0.8
        assert "params" in m.describe() and "cv_score" in m.describe()

    @pytest.mark.parametrize("cls", [B.KnnMethod, B.TreeMethod])
    def test_tiny_context(self, cls):
        m = cls()
        m.fit(np.array([[0.0], [1.0]]), np.array([0, 1]), 2, seed=0)
        assert m.predict(np.array([[0.1], [0.9]])).shape == (2,)

    def test_untuned(self):
        X = np.arange(10.0)[:, None]
        y = (X[:, 0] > 4).astype(int)
        for m in (B.KnnMethod(None), B.TreeMethod(None)):
            assert m.fit(X, y, 2, 0) == 0.0
            np.testing.assert_array_equal(m.predict(X), y)
