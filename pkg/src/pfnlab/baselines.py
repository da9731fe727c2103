"""k-nearest neighbors, CART decision trees and a random-search tuner.

Both classifiers are exact and fully deterministic:

* k-NN uses exact squared Euclidean distances; equal distances favour the
  lower training-row index and vote ties favour the lower class.
* CART grows greedy Gini splits at midpoints between consecutive distinct
  feature values.  Candidate scores are compared exactly (integer
  arithmetic) so ties resolve to the lowest feature, then the lowest
  threshold, independent of float rounding.

A tree grown with only ``min_samples_leaf`` set contains every tree with
the same leaf limit and tighter ``max_depth``/``min_samples_split`` as a
prefix, because the split chosen at a node depends only on the node's rows
and the leaf limit.  ``Tree`` stores the fully grown tree and applies the
depth and split limits while predicting, which lets the tuner reuse one
fit for many configurations.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError

KNN_MAX_K = 50
DEPTH_RANGE = (1, 20)
SPLIT_RANGE = (2, 20)
LEAF_RANGE = (1, 10)
_CHUNK = 256


def _as_xy(X, y=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ContractError("feature matrix must be 2-D")
    if y is None:
        return X
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (X.shape[0],):
        raise ContractError("one label per row required")
    if X.shape[0] == 0:
        raise ContractError("training set is empty")
    return X, y


# ---------------------------------------------------------------------------
# k-NN


@dataclass(frozen=True)
class KnnParams:
    k: int = 5

    def __post_init__(self):
        if self.k < 1:
            raise ContractError("k must be >= 1")


def neighbor_order(X_train, X_query, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest training rows for every query row.

    Distances are computed as the plain sum of squared differences; a
    stable sort breaks ties by training-row index.
    """
    Xt = _as_xy(X_train)
    Xq = _as_xy(X_query)
    if Xt.shape[1] != Xq.shape[1]:
        raise ContractError("train and query feature counts differ")
    k = min(k, Xt.shape[0])
    out = np.empty((Xq.shape[0], k), dtype=np.int64)
    for s in range(0, Xq.shape[0], _CHUNK):
        diff = Xq[s:s + _CHUNK, None, :] - Xt[None, :, :]
        d = np.einsum("qnf,qnf->qn", diff, diff)
        out[s:s + _CHUNK] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def vote(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Row-wise majority of an ``(n_query, k)`` label matrix, lowest class on ties."""
    counts = np.zeros((labels.shape[0], n_classes), dtype=np.int64)
    np.add.at(counts, (np.arange(labels.shape[0])[:, None], labels), 1)
    return counts.argmax(axis=1)


def knn_predict(X_train, y_train, X_query, params: KnnParams, n_classes: int | None = None) -> np.ndarray:
    X_train, y_train = _as_xy(X_train, y_train)
    if params.k > len(y_train):
        raise ContractError(f"k={params.k} exceeds the {len(y_train)} training rows")
    n_classes = int(y_train.max()) + 1 if n_classes is None else n_classes
    order = neighbor_order(X_train, X_query, params.k)
    return vote(y_train[order], n_classes)


# ---------------------------------------------------------------------------
# CART


@dataclass(frozen=True)
class TreeParams:
    max_depth: int = 20
    min_samples_split: int = 2
    min_samples_leaf: int = 1

    def __post_init__(self):
        if self.max_depth < 1:
            raise ContractError("max_depth must be >= 1")
        if self.min_samples_split < 2:
            raise ContractError("min_samples_split must be >= 2")
        if self.min_samples_leaf < 1:
            raise ContractError("min_samples_leaf must be >= 1")


@dataclass
class Tree:
    """Array-based binary tree.  ``feature == -1`` marks a leaf of the full tree."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    depth: np.ndarray
    n_samples: np.ndarray
    value: np.ndarray  # majority class at each node
    counts: np.ndarray  # (n_nodes, n_classes)
    params: TreeParams = field(default_factory=TreeParams)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_split(self, params: TreeParams | None = None) -> np.ndarray:
        """Which nodes act as internal nodes under ``params``' depth/split limits."""
        p = params or self.params
        return (self.feature >= 0) & (self.depth < p.max_depth) & (self.n_samples >= p.min_samples_split)


def best_split(X: np.ndarray, y: np.ndarray, n_classes: int, min_leaf: int):
    """Best Gini split of one node, or ``None``.

    Maximizes ``sum(cL^2)/nL + sum(cR^2)/nR`` (equivalent to minimizing the
    weighted Gini impurity).  Returns ``(feature, threshold, position)``
    where ``position`` is the number of rows sent left.
    """
    n, d = X.shape
    onehot = np.zeros((n, n_classes), dtype=np.int64)
    onehot[np.arange(n), y] = 1
    total = onehot.sum(axis=0)
    nl = np.arange(1, n, dtype=np.int64)
    valid_size = (nl >= min_leaf) & (n - nl >= min_leaf)
    if not valid_size.any():
        return None
    cands = []  # (feature, positions, A, B, order, xs)
    best = -np.inf
    for j in range(d):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        ok = valid_size & (xs[1:] > xs[:-1])
        if not ok.any():
            continue
        cl = np.cumsum(onehot[order], axis=0)[:-1]
        cr = total - cl
        a = (cl * cl).sum(axis=1)
        b = (cr * cr).sum(axis=1)
        s = a / nl + b / (n - nl)
        s = np.where(ok, s, -np.inf)
        m = s.max()
        best = max(best, m)
        cands.append((j, s, a, b, xs))
    if not cands:
        return None
    # exact comparison among near-maximal candidates
    tol = 1e-9 * max(1.0, abs(best))
    win = None
    for j, s, a, b, xs in cands:
        for i in np.flatnonzero(s >= best - tol):
            left = int(i) + 1
            num = int(a[i]) * (n - left) + int(b[i]) * left
            den = left * (n - left)
            if win is None or num * win[1] > win[0] * den:
                win = (num, den, j, i, xs)
    _, _, j, i, xs = win
    thr = 0.5 * (xs[i] + xs[i + 1])
    if not thr < xs[i + 1]:
        thr = xs[i]
    return j, float(thr), int(i) + 1


def tree_fit(X_train, y_train, params: TreeParams | None = None, n_classes: int | None = None,
             grow_full: bool = False) -> Tree:
    """Grow a CART tree.

    ``grow_full=True`` ignores ``max_depth`` and ``min_samples_split`` while
    growing (they are still applied at prediction time through
    ``params``); this is how the tuner shares one fit across configurations.
    """
    X, y = _as_xy(X_train, y_train)
    params = params or TreeParams()
    C = int(y.max()) + 1 if n_classes is None else n_classes
    feature, threshold, left, right, depth, n_samples, value, counts = ([] for _ in range(8))
    stack = [(np.arange(len(y)), 0, None, False)]
    while stack:
        idx, dep, parent, is_right = stack.pop()
        node = len(feature)
        if parent is not None:
            (right if is_right else left)[parent] = node
        cnt = np.bincount(y[idx], minlength=C)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        depth.append(dep)
        n_samples.append(len(idx))
        value.append(int(cnt.argmax()))
        counts.append(cnt)
        if len(idx) == 0:
            raise ContractError("empty tree node")
        if (cnt > 0).sum() < 2:
            continue
        if not grow_full and (dep >= params.max_depth or len(idx) < params.min_samples_split):
            continue
        split = best_split(X[idx], y[idx], C, params.min_samples_leaf)
        if split is None:
            continue
        j, thr, _ = split
        go_left = X[idx, j] <= thr
        feature[node] = j
        threshold[node] = thr
        # right pushed first so the left subtree is numbered first
        stack.append((idx[~go_left], dep + 1, node, True))
        stack.append((idx[go_left], dep + 1, node, False))
    as_int = lambda v: np.asarray(v, dtype=np.int64)
    return Tree(as_int(feature), np.asarray(threshold), as_int(left), as_int(right), as_int(depth),
                as_int(n_samples), as_int(value), np.vstack(counts), params)


def tree_predict(tree: Tree, X_query, params: TreeParams | None = None) -> np.ndarray:
    """Route queries down the tree; ``params`` may tighten depth/split limits."""
    X = _as_xy(X_query)
    internal = tree.is_split(params)
    node = np.zeros(len(X), dtype=np.int64)
    active = np.flatnonzero(internal[node])
    while active.size:
        nd = node[active]
        go_left = X[active, tree.feature[nd]] <= tree.threshold[nd]
        node[active] = np.where(go_left, tree.left[nd], tree.right[nd])
        active = active[internal[node[active]]]
    return tree.value[node]


# ---------------------------------------------------------------------------
# tuning


@dataclass(frozen=True)
class TuneBudget:
    folds: int = 5
    max_configs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ContractError("folds must be >= 2")
        if self.max_configs < 1:
            raise ContractError("max_configs must be >= 1")


@dataclass
class TuneResult:
    family: str
    params: object
    cv_score: float
    seconds: float
    stratified: bool
    n_evaluated: int
    folds: list  # [(train_idx, val_idx)] over the rows handed to ``tune``
    history: list = field(default_factory=list)  # [(params, score)] in evaluation order

    def to_dict(self) -> dict:
        return {"family": self.family, "params": asdict(self.params), "cv_score": self.cv_score,
                "seconds": self.seconds, "stratified": self.stratified, "n_evaluated": self.n_evaluated}


def make_folds(y, n_folds: int, rng) -> tuple[list, bool]:
    """Stratified fold assignment; unstratified if a class has fewer rows than folds.

    Returns ``([(train_idx, val_idx), ...], stratified)``.
    """
    y = np.asarray(y)
    n = len(y)
    if n < n_folds:
        raise ContractError(f"{n} rows cannot fill {n_folds} folds")
    classes, counts = np.unique(y, return_counts=True)
    stratified = bool(counts.min() >= n_folds)
    fold_of = np.empty(n, dtype=np.int64)
    if stratified:
        offset = 0
        for c in classes:
            idx = rng.permutation(np.flatnonzero(y == c))
            fold_of[idx] = (offset + np.arange(len(idx))) % n_folds
            offset += len(idx)
    else:
        idx = rng.permutation(n)
        fold_of[idx] = np.arange(n) % n_folds
    folds = [(np.flatnonzero(fold_of != f), np.flatnonzero(fold_of == f)) for f in range(n_folds)]
    return folds, stratified


def _sample_configs(family: str, budget: TuneBudget, k_max: int, rng) -> list:
    seen, out = set(), []
    for _ in range(budget.max_configs):
        if family == "knn":
            p = KnnParams(int(rng.integers(1, k_max + 1)))
        else:
            p = TreeParams(int(rng.integers(DEPTH_RANGE[0], DEPTH_RANGE[1] + 1)),
                           int(rng.integers(SPLIT_RANGE[0], SPLIT_RANGE[1] + 1)),
                           int(rng.integers(LEAF_RANGE[0], LEAF_RANGE[1] + 1)))
        if p not in seen:
            seen.add(p)
            out.append(p)
    return out


def tune(family: str, X_train, y_train, budget: TuneBudget, rng=None, n_classes: int | None = None) -> TuneResult:
    """Random search over hyperparameters by mean fold accuracy.

    Every candidate is scored on the same folds; the first configuration
    reaching the best mean accuracy wins.  ``rng`` defaults to a generator
    seeded with ``budget.seed``.
    """
    if family not in ("knn", "tree"):
        raise ContractError(f"unknown family {family!r}")
    t0 = time.perf_counter()
    X, y = _as_xy(X_train, y_train)
    C = int(y.max()) + 1 if n_classes is None else n_classes
    rng = np.random.default_rng(budget.seed) if rng is None else rng
    folds, stratified = make_folds(y, budget.folds, rng)
    k_max = min(KNN_MAX_K, min(len(tr) for tr, _ in folds))
    configs = _sample_configs(family, budget, k_max, rng)

    if family == "knn":
        orders = [neighbor_order(X[tr], X[va], k_max) for tr, va in folds]

        def score(p):
            return [float(np.mean(vote(y[tr][o[:, :p.k]], C) == y[va])) for (tr, va), o in zip(folds, orders)]
    else:
        grown = {}

        def score(p):
            key = p.min_samples_leaf
            if key not in grown:
                grown[key] = [tree_fit(X[tr], y[tr], TreeParams(min_samples_leaf=key), C, grow_full=True)
                              for tr, _ in folds]
            return [float(np.mean(tree_predict(t, X[va], p) == y[va])) for t, (_, va) in zip(grown[key], folds)]

    best, best_score, history = None, -1.0, []
    for p in configs:
        s = float(np.mean(score(p)))
        history.append((p, s))
        if s > best_score:
            best, best_score = p, s
    return TuneResult(family, best, best_score, time.perf_counter() - t0, stratified,
                      len(configs), folds, history)


# ---------------------------------------------------------------------------
# uniform method interface


class Method:
    """Fit on a labeled context, then predict query rows.

    ``fit`` returns the seconds spent tuning (0 for untuned methods) so the
    harness can report tuning and training time separately.
    """

    name = "method"

    def capacity_issue(self, n_rows: int, n_features: int, n_classes: int) -> str | None:
        return None

    def fit(self, X, y, n_classes: int, seed: int) -> float:
        raise NotImplementedError

    def predict(self, X) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {}


class KnnMethod(Method):
    name = "KNN"

    def __init__(self, budget: TuneBudget | None = TuneBudget()):
        self.budget = budget
        self.params = None
        self.tuned = None

    def fit(self, X, y, n_classes, seed):
        self.X, self.y, self.C = np.asarray(X, dtype=np.float64), np.asarray(y), n_classes
        tune_s = 0.0
        if self.budget is None:
            self.params = KnnParams(min(5, len(self.y)))
        else:
            folds = max(2, min(self.budget.folds, len(self.y)))
            b = TuneBudget(folds, self.budget.max_configs, seed)
            self.tuned = tune("knn", self.X, self.y, b, n_classes=n_classes)
            self.params = self.tuned.params
            tune_s = self.tuned.seconds
        return tune_s

    def predict(self, X):
        return knn_predict(self.X, self.y, X, self.params, self.C)

    def describe(self):
        d = {"params": asdict(self.params)} if self.params else {}
        if self.tuned:
            d.update(cv_score=self.tuned.cv_score, stratified=self.tuned.stratified)
        return d


class TreeMethod(Method):
    name = "DT"

    def __init__(self, budget: TuneBudget | None = TuneBudget()):
        self.budget = budget
        self.params = None
        self.tuned = None

    def fit(self, X, y, n_classes, seed):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        tune_s = 0.0
        if self.budget is None or len(y) < 2:
            self.params = TreeParams()
        else:
            folds = max(2, min(self.budget.folds, len(y)))
            b = TuneBudget(folds, self.budget.max_configs, seed)
            self.tuned = tune("tree", X, y, b, n_classes=n_classes)
            self.params = self.tuned.params
            tune_s = self.tuned.seconds
        self.tree = tree_fit(X, y, self.params, n_classes)
        return tune_s

    def predict(self, X):
        return tree_predict(self.tree, X)

    def describe(self):
        d = {"params": asdict(self.params)} if self.params else {}
        if self.tuned:
            d.update(cv_score=self.tuned.cv_score, stratified=self.tuned.stratified)
        return d
