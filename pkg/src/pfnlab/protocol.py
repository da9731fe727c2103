"""Benchmark protocol: split planning, fraction prefixes, preprocessing and execution.

For every dataset, ``make_splits`` draws independent row permutations.
Without a fixed test split the first ``ceil(0.2 n)`` permuted rows are the
test set and the rest the training set; with one, only the training rows
are permuted.  Each method is then trained on growing prefixes of the
training permutation (``FRACTIONS``) and scored on the full test set.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .baselines import KnnMethod, Method, TreeMethod, TuneBudget
from .dataio import Dataset
from .errors import ConfigError, PfnError
from .model import Checkpoint, predict_proba_chunked
from .prior import make_rng
from .stats import accuracy, f1_macro, task_f1

log = logging.getLogger(__name__)

# training-set prefixes, in percent
FRACTIONS = (5, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100)
TEST_FRACTION = 0.2
GUARD_MIN = 2
GUARD_WINDOW = 100
MAX_REDRAWS = 1000


def fraction_schedule() -> tuple:
    """Prefix fractions as floats, ascending."""
    return tuple(p / 100 for p in FRACTIONS)


def prefix_size(n_train: int, percent: int, n_classes: int) -> int:
    """``ceil(percent/100 * n_train)`` rows, at least ``max(2, n_classes)``, at most ``n_train``."""
    if not 0 < percent <= 100:
        raise ConfigError("percent must lie in (0, 100]")
    return min(n_train, max(-(-percent * n_train // 100), max(2, n_classes)))


def stable_hash(*parts) -> int:
    """63-bit hash of the string forms of ``parts`` (process-independent)."""
    blob = "\x1f".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little") >> 1


@dataclass
class SplitPlan:
    split_id: int
    train_idx: np.ndarray  # rows of ds.X, in prefix order
    test_idx: np.ndarray  # rows of ds.X, or of ds.X_test when fixed_test
    fixed_test: bool
    redraws: int = 0


def _guard_ok(y_train_perm: np.ndarray, n_classes: int, min_count: int, window: int) -> bool:
    head = np.bincount(y_train_perm[:window], minlength=n_classes)
    present = np.bincount(y_train_perm, minlength=n_classes) > 0
    return bool(np.all(head[present] >= min_count))


def make_splits(ds: Dataset, n_reps: int, seed: int, test_fraction: float = TEST_FRACTION,
                guard_min: int = GUARD_MIN, guard_window: int = GUARD_WINDOW) -> list:
    """Independent split plans for ``ds``.

    With ``ds.imbalance_guard`` set, a permutation is redrawn (up to
    ``MAX_REDRAWS`` times) until every class present in the training rows
    has at least ``guard_min`` rows among the first ``guard_window``.
    """
    if n_reps < 1:
        raise ConfigError("n_reps must be >= 1")
    n = len(ds.y)
    plans = []
    for rep in range(n_reps):
        rng = make_rng(seed, stable_hash("split", ds.name), rep)
        for attempt in range(MAX_REDRAWS):
            if ds.has_fixed_test:
                train = rng.permutation(n)
                test = np.arange(len(ds.y_test))
            else:
                perm = rng.permutation(n)
                n_test = math.ceil(test_fraction * n)
                if not 1 <= n_test < n:
                    raise ConfigError(f"{ds.name}: {n} rows cannot be split with test fraction {test_fraction}")
                test, train = perm[:n_test], perm[n_test:]
            if not ds.imbalance_guard or _guard_ok(ds.y[train], ds.n_classes, guard_min, guard_window):
                plans.append(SplitPlan(rep, train, test, ds.has_fixed_test, attempt))
                break
        else:
            raise ConfigError(
                f"{ds.name}: no permutation in {MAX_REDRAWS} draws puts {guard_min} rows of every class "
                f"in the first {guard_window} training rows"
            )
    return plans


@dataclass
class Preprocessed:
    X_train: np.ndarray
    X_test: np.ndarray
    y_train: np.ndarray  # contiguous labels 0..k-1
    classes: np.ndarray  # original label of each contiguous label
    mean: np.ndarray
    std: np.ndarray

    def inverse(self, y) -> np.ndarray:
        return self.classes[np.asarray(y, dtype=np.int64)]


def preprocess(X_train, y_train, X_test) -> Preprocessed:
    """Standard-scale with training statistics and remap labels to ``0..k-1``."""
    X_train = np.asarray(X_train, dtype=np.float64)
    X_test = np.asarray(X_test, dtype=np.float64)
    if X_train.shape[0] == 0:
        raise ConfigError("training set is empty")
    mean = X_train.mean(axis=0)
    std = X_train.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    classes, y_map = np.unique(np.asarray(y_train), return_inverse=True)
    return Preprocessed((X_train - mean) / std, (X_test - mean) / std, y_map.astype(np.int64),
                        classes, mean, std)


class PfnMethod(Method):
    """In-context prediction with a frozen checkpoint (no tuning, no weight updates)."""

    name = "PFN"

    def __init__(self, ckpt: Checkpoint):
        self.ckpt = ckpt

    def capacity_issue(self, n_rows, n_features, n_classes):
        cfg = self.ckpt.config
        if n_features > cfg.max_features:
            return f"{n_features} features exceed PFN capacity {cfg.max_features}"
        if n_classes > cfg.max_classes:
            return f"{n_classes} classes exceed PFN capacity {cfg.max_classes}"
        if n_rows >= cfg.max_context:
            return f"{n_rows} training rows exceed PFN context {cfg.max_context - 1}"
        return None

    def fit(self, X, y, n_classes, seed):
        self.X, self.y, self.C = X, y, n_classes
        return 0.0

    def predict(self, X):
        return np.argmax(predict_proba_chunked(self.X, self.y, X, self.ckpt, self.C), axis=1)

    def describe(self):
        return {"prior": self.ckpt.prior_hash, "steps": self.ckpt.steps}


def default_methods(ckpt: Checkpoint | None, budget: TuneBudget | None = TuneBudget()) -> list:
    methods = [PfnMethod(ckpt)] if ckpt is not None else []
    return methods + [KnnMethod(budget), TreeMethod(budget)]


@dataclass
class BenchmarkRecord:
    dataset: str
    method: str
    split: int
    fraction: int  # percent
    status: str  # ok | skipped | failed
    n_train: int
    n_test: int
    seed: int
    f1: float | None = None
    f1_macro: float | None = None
    accuracy: float | None = None
    tune_seconds: float | None = None
    train_seconds: float | None = None
    inference_seconds: float | None = None
    params: str = ""
    reason: str = ""

    @property
    def key(self):
        return (self.dataset, self.method, self.split, self.fraction)

    @property
    def total_seconds(self):
        if self.status != "ok":
            return None
        return self.tune_seconds + self.train_seconds + self.inference_seconds

    def to_row(self) -> dict:
        d = asdict(self)
        d["total_seconds"] = self.total_seconds
        return d


def _params_text(desc: dict) -> str:
    return json.dumps(desc, sort_keys=True, separators=(",", ":"), default=str)


def _run_unit(ds: Dataset, plan: SplitPlan, method: Method, seed: int, fractions, audit: bool):
    """All fractions of one (dataset, split, method); returns (records, audit rows)."""
    X_test_src = ds.X_test if plan.fixed_test else ds.X
    y_test_src = ds.y_test if plan.fixed_test else ds.y
    X_test, y_test = X_test_src[plan.test_idx], y_test_src[plan.test_idx]
    records, trail = [], []
    for pct in fractions:
        m = prefix_size(len(plan.train_idx), pct, ds.n_classes)
        rows = plan.train_idx[:m]
        rseed = stable_hash(seed, ds.name, plan.split_id, pct, method.name)
        rec = BenchmarkRecord(ds.name, method.name, plan.split_id, pct, "ok", m, len(y_test), rseed)
        issue = method.capacity_issue(m, ds.n_features, ds.n_classes)
        if issue:
            rec.status, rec.reason = "skipped", issue
            records.append(rec)
            continue
        try:
            t0 = time.perf_counter()
            prep = preprocess(ds.X[rows], ds.y[rows], X_test)
            tune_s = method.fit(prep.X_train, prep.y_train, len(prep.classes), rseed % (2**32))
            t1 = time.perf_counter()
            pred = prep.inverse(method.predict(prep.X_test))
            t2 = time.perf_counter()
        except (PfnError, ValueError, ArithmeticError) as exc:
            rec.status, rec.reason = "failed", f"{type(exc).__name__}: {exc}"
            records.append(rec)
            continue
        rec.tune_seconds = tune_s
        rec.train_seconds = max(t1 - t0 - tune_s, 0.0)
        rec.inference_seconds = t2 - t1
        rec.f1 = task_f1(y_test, pred, ds.n_classes)
        rec.f1_macro = f1_macro(y_test, pred, ds.n_classes)
        rec.accuracy = accuracy(y_test, pred)
        rec.params = _params_text(method.describe())
        records.append(rec)
        if audit:
            tuned = getattr(method, "tuned", None)
            trail.append({
                "key": rec.key,
                "train_rows": rows.copy(),
                "test_rows": plan.test_idx.copy(),
                "fixed_test": plan.fixed_test,
                "scaler_mean": prep.mean.copy(),
                "tune_rows": None if tuned is None else len(tuned.folds[0][0]) + len(tuned.folds[0][1]),
                "folds": None if tuned is None else tuned.folds,
            })
    return records, trail


def _unit_job(args):
    return _run_unit(*args)


def run_benchmark(datasets, methods, n_reps: int = 20, seed: int = 0, workers: int = 1,
                  fractions=FRACTIONS, audit: list | None = None) -> list:
    """Run every (dataset, split, fraction, method) combination.

    Records are independent given their derived seeds, so ``workers > 1``
    spreads (dataset, split, method) units over processes without changing
    any result.  Pass a list as ``audit`` to collect, per record, the row
    indices each method was trained on.
    """
    for m in methods:
        if not isinstance(m, Method):
            raise ConfigError(f"{m!r} does not implement the method interface")
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise ConfigError("method names must be unique")
    jobs = []
    for ds in datasets:
        for plan in make_splits(ds, n_reps, seed):
            for m in methods:
                jobs.append((ds, plan, m, seed, tuple(fractions), audit is not None))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_unit_job, jobs))
    else:
        results = [_unit_job(j) for j in jobs]
    records = []
    for recs, trail in results:
        records.extend(recs)
        if audit is not None:
            audit.extend(trail)
    records.sort(key=lambda r: r.key)
    return records
