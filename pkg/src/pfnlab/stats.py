"""Classification metrics, rank statistics and curve summaries.

All functions are pure and work on plain sequences or numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, DimensionError


# ---------------------------------------------------------------------------
# point metrics


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ContractError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _labels(y_true, y_pred):
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise DimensionError("y_true and y_pred must be 1-D and of equal length")
    return y_true, y_pred


def confusion_counts(y_true, y_pred, positive=1) -> ConfusionCounts:
    """One-vs-rest counts for class ``positive``."""
    y_true, y_pred = _labels(y_true, y_pred)
    t = y_true == positive
    p = y_pred == positive
    return ConfusionCounts(int(np.sum(t & p)), int(np.sum(~t & p)), int(np.sum(t & ~p)), int(np.sum(~t & ~p)))


def f1_binary(counts: ConfusionCounts) -> float:
    """``2TP / (2TP + FP + FN)``; 0 when nothing is predicted or present."""
    denom = 2 * counts.tp + counts.fp + counts.fn
    return 0.0 if denom == 0 else 2 * counts.tp / denom


def f1_macro(y_true, y_pred, n_classes: int) -> float:
    """Unweighted mean of per-class F1 over ``range(n_classes)``."""
    y_true, y_pred = _labels(y_true, y_pred)
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) >= n_classes):
        raise ContractError("labels outside [0, n_classes)")
    return float(np.mean([f1_binary(confusion_counts(y_true, y_pred, c)) for c in range(n_classes)]))


def task_f1(y_true, y_pred, n_classes: int) -> float:
    """Reported F1: class-1 F1 for binary tasks, macro-F1 otherwise."""
    if n_classes == 2:
        return f1_binary(confusion_counts(y_true, y_pred, 1))
    return f1_macro(y_true, y_pred, n_classes)


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = _labels(y_true, y_pred)
    if y_true.size == 0:
        raise ContractError("accuracy of an empty prediction set is undefined")
    return float(np.mean(y_true == y_pred))


# ---------------------------------------------------------------------------
# data efficiency


@dataclass(frozen=True)
class EfficiencyRecord:
    n_max: int
    n_best: int
    n_m: int
    eta: float


def data_efficiency(curves: dict, counts, n_max: int | None = None, threshold_ratio: float = 0.9) -> dict:
    """Relative data efficiency of every method on one split.

    Parameters
    ----------
    curves : dict
        Method name -> scores, one per entry of ``counts``.
    counts : sequence of int
        Increasing training-set sizes shared by all curves.
    n_max : int, optional
        Full training-set size; defaults to ``counts[-1]``.
    threshold_ratio : float
        Fraction of the best observed score a method has to reach.

    Returns
    -------
    dict
        Method name -> ``EfficiencyRecord``.  ``eta`` is the share of data
        left when the method first reaches the threshold, relative to the
        first method to do so.  When no method reaches it before ``n_max``
        (or all scores are <= 0) every ``eta`` is 0.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0 or np.any(np.diff(counts) <= 0):
        raise ContractError("counts must be strictly increasing")
    n_max = int(counts[-1]) if n_max is None else int(n_max)
    scores = {m: np.asarray(v, dtype=np.float64) for m, v in curves.items()}
    for m, v in scores.items():
        if v.shape != counts.shape:
            raise DimensionError(f"curve of {m!r} has {v.size} points, expected {counts.size}")
    best = max(float(v.max()) for v in scores.values())
    if best <= 0.0:
        return {m: EfficiencyRecord(n_max, n_max, n_max, 0.0) for m in scores}
    threshold = threshold_ratio * best
    needed = {}
    for m, v in scores.items():
        hit = np.flatnonzero(v >= threshold)
        needed[m] = int(counts[hit[0]]) if hit.size else n_max
    n_best = min(needed.values())
    if n_best >= n_max:
        return {m: EfficiencyRecord(n_max, n_max, needed[m], 0.0) for m in scores}
    return {
        m: EfficiencyRecord(n_max, n_best, n_m, (n_max - n_m) / (n_max - n_best))
        for m, n_m in needed.items()
    }


# ---------------------------------------------------------------------------
# ranking and significance


def rank_scores(scores, higher_better: bool = True) -> np.ndarray:
    """Rank 1 = best; ties share the average rank."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 2:
        raise ContractError("ranking needs at least two methods")
    return rankdata(-s if higher_better else s, method="average")


def chi_square_survival(x: float, df: int) -> float:
    """Upper tail of the chi-square distribution, ``Q(df/2, x/2)``."""
    if x < 0 or df < 1:
        raise ContractError("chi_square_survival needs x >= 0 and df >= 1")
    if x == 0:
        return 1.0
    a, z = df / 2.0, x / 2.0
    log_pref = a * math.log(z) - z - math.lgamma(a)
    if z < a + 1.0:
        # series for the lower regularized gamma P(a, z)
        term = total = 1.0 / a
        ap = a
        for _ in range(10_000):
            ap += 1.0
            term *= z / ap
            total += term
            if abs(term) < abs(total) * 1e-16:
                break
        return max(0.0, 1.0 - total * math.exp(log_pref))
    # modified Lentz continued fraction for Q(a, z)
    tiny = 1e-300
    b = z + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return min(1.0, math.exp(log_pref) * h)


def friedman_test(rank_matrix):
    """Friedman statistic and p-value for an ``(n_blocks, k)`` rank matrix."""
    r = np.asarray(rank_matrix, dtype=np.float64)
    if r.ndim != 2:
        raise DimensionError("rank matrix must be 2-D")
    n, k = r.shape
    if k < 3:
        raise ContractError("Friedman test needs at least three methods; compare pairs directly")
    if n < 1:
        raise ContractError("Friedman test needs at least one block")
    mean_ranks = r.mean(axis=0)
    stat = 12.0 * n / (k * (k + 1)) * float(np.sum(mean_ranks**2)) - 3.0 * n * (k + 1)
    # exact ties give a tiny negative value through rounding
    stat = max(stat, 0.0)
    return stat, chi_square_survival(stat, k - 1)


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p: float
    n: int
    exact: bool
    degenerate: bool = False


def _exact_signed_rank_cdf(doubled_ranks, w2: int) -> float:
    """P(sum of randomly signed positive ranks <= w2/2), all ranks doubled to integers."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    hits = sum(counts[: w2 + 1])
    return hits / 2 ** len(doubled_ranks)


def wilcoxon_signed_rank(a, b, exact_limit: int = 12) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped.  Tied ``|d|`` get average ranks.  For at
    most ``exact_limit`` pairs the p-value is exact (the sign-flip
    distribution is tabulated over integer doubled ranks); larger samples
    use the normal approximation with tie and continuity corrections.

    Raises
    ------
    ContractError
        Fewer than five non-zero differences.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError("paired samples must be 1-D and of equal length")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0 and a.size > 0:
        return WilcoxonResult(0.0, 1.0, 0, True, degenerate=True)
    if n < 5:
        raise ContractError(f"Wilcoxon test needs at least 5 non-zero differences, got {n}")
    ranks = rankdata(np.abs(d), method="average")
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= exact_limit:
        doubled = [int(round(2 * r)) for r in ranks]
        p = min(1.0, 2.0 * _exact_signed_rank_cdf(doubled, int(round(2 * w))))
        return WilcoxonResult(w, float(p), n, True)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    if var <= 0:
        return WilcoxonResult(w, 1.0, n, False, degenerate=True)
    z = max(abs(w - mean) - 0.5, 0.0) / math.sqrt(var)
    return WilcoxonResult(w, min(1.0, math.erfc(z / math.sqrt(2.0))), n, False)


def holm_adjust(p_values) -> np.ndarray:
    """Holm step-down adjusted p-values, in input order."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.ndim != 1:
        raise DimensionError("p-values must be 1-D")
    if np.any((p < 0) | (p > 1)):
        raise ContractError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = (m - np.arange(m)) * p[order]
    adj = np.minimum(np.maximum.accumulate(scaled), 1.0)
    out = np.empty_like(p)
    out[order] = adj
    return out


def _maximal_cliques(adjacent: list[set]) -> list[tuple]:
    """Bron-Kerbosch with pivoting."""
    found = []

    def expand(r, p, x):
        if not p and not x:
            found.append(tuple(sorted(r)))
            return
        pivot = max(p | x, key=lambda u: len(adjacent[u] & p))
        for v in sorted(p - adjacent[pivot]):
            expand(r | {v}, p & adjacent[v], x & adjacent[v])
            p = p - {v}
            x = x | {v}

    expand(set(), set(range(len(adjacent))), set())
    return found


def significance_groups(avg_ranks, p_adjusted, alpha: float = 0.05) -> list[tuple]:
    """Maximal sets of methods that are pairwise indistinguishable.

    Two methods are indistinguishable when their adjusted p-value is at
    least ``alpha``.  Groups are returned as sorted index tuples, ordered
    by mean average rank of their members.
    """
    ranks = np.asarray(avg_ranks, dtype=np.float64)
    p = np.asarray(p_adjusted, dtype=np.float64)
    k = ranks.size
    if p.shape != (k, k):
        raise DimensionError("p matrix must be k x k")
    if not np.allclose(p, p.T, equal_nan=True):
        raise ContractError("p matrix must be symmetric")
    adjacent = [{j for j in range(k) if j != i and p[i, j] >= alpha} for i in range(k)]
    groups = _maximal_cliques(adjacent)
    return sorted(groups, key=lambda g: (float(np.mean(ranks[list(g)])), g))


@dataclass
class RankSummary:
    methods: list
    avg_ranks: np.ndarray
    friedman_stat: float | None
    friedman_p: float | None
    p_raw: np.ndarray
    p_adjusted: np.ndarray
    groups: list
    n_blocks: int
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "methods": list(self.methods),
            "avg_ranks": {m: float(r) for m, r in zip(self.methods, self.avg_ranks)},
            "friedman": {"statistic": self.friedman_stat, "p": self.friedman_p},
            "p_raw": self.p_raw.tolist(),
            "p_adjusted": self.p_adjusted.tolist(),
            "groups": [[self.methods[i] for i in g] for g in self.groups],
            "n_blocks": self.n_blocks,
            "notes": list(self.notes),
        }


def rank_summary(score_matrix, methods, higher_better: bool = True, alpha: float = 0.05,
                 exact_limit: int = 12) -> RankSummary:
    """Average ranks, Friedman test and Holm-adjusted pairwise Wilcoxon tests.

    Parameters
    ----------
    score_matrix : array_like, shape (n_blocks, k)
        One row per block (dataset x split x fraction), one column per method.
    methods : sequence of str
        Column names.

    Notes
    -----
    Pairwise tests compare the raw scores of two methods over blocks.  When
    the Friedman test does not reject at ``alpha`` all methods form one
    group.  Pairs with fewer than five non-zero differences get p = 1.
    """
    s = np.asarray(score_matrix, dtype=np.float64)
    methods = list(methods)
    if s.ndim != 2 or s.shape[1] != len(methods):
        raise DimensionError("score matrix needs one column per method")
    n, k = s.shape
    ranks = np.vstack([rank_scores(row, higher_better) for row in s])
    avg = ranks.mean(axis=0)
    notes = []
    f_stat = f_p = None
    if k >= 3:
        f_stat, f_p = friedman_test(ranks)
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
    raw = []
    for i, j in pairs:
        try:
            raw.append(wilcoxon_signed_rank(s[:, i], s[:, j], exact_limit).p)
        except ContractError:
            notes.append(f"too few non-zero differences for {methods[i]} vs {methods[j]}; p set to 1")
            raw.append(1.0)
    adj = holm_adjust(raw) if raw else np.array([])
    p_raw = np.ones((k, k))
    p_adj = np.ones((k, k))
    for (i, j), pr, pa in zip(pairs, raw, adj):
        p_raw[i, j] = p_raw[j, i] = pr
        p_adj[i, j] = p_adj[j, i] = pa
    if f_p is not None and f_p >= alpha:
        notes.append("Friedman test did not reject; all methods grouped")
        groups = [tuple(range(k))]
    else:
        groups = significance_groups(avg, p_adj, alpha)
    return RankSummary(methods, avg, f_stat, f_p, p_raw, p_adj, groups, n, notes)


# ---------------------------------------------------------------------------
# curves


def auc_trapezoid(fractions, values, log: bool = False) -> float:
    """Trapezoidal area under ``values`` divided by the span of ``fractions``.

    With ``log=True`` the curve is integrated in log10 space (values must be
    positive).  A constant curve returns that constant exactly.
    """
    f = np.asarray(fractions, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if f.shape != v.shape or f.ndim != 1:
        raise DimensionError("fractions and values must be 1-D and of equal length")
    if f.size < 2 or np.any(np.diff(f) <= 0):
        raise ContractError("fractions must be strictly increasing with at least two points")
    if log:
        if np.any(v <= 0):
            raise ContractError("log AUC needs positive values")
        v = np.log10(v)
    # integrate the offset from the first value so constants come back exactly
    dv = v - v[0]
    area = float(np.sum(np.diff(f) * (dv[1:] + dv[:-1]) / 2.0))
    return float(v[0] + area / (f[-1] - f[0]))


def pareto_rank(points) -> np.ndarray:
    """Non-dominated sorting on ``(score to maximize, cost to minimize)`` pairs.

    Returns integer ranks starting at 1 for the non-dominated front.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
        raise DimensionError("points must have shape (n, 2) with n >= 1")
    perf, cost = pts[:, 0], pts[:, 1]
    no_worse = (perf[:, None] >= perf[None, :]) & (cost[:, None] <= cost[None, :])
    strictly = (perf[:, None] > perf[None, :]) | (cost[:, None] < cost[None, :])
    dominates = no_worse & strictly  # [i, j]: i dominates j
    ranks = np.zeros(len(pts), dtype=np.int64)
    remaining = np.ones(len(pts), dtype=bool)
    level = 0
    while remaining.any():
        level += 1
        front = remaining & ~(dominates[remaining].any(axis=0))
        ranks[front] = level
        remaining &= ~front
    return ranks
