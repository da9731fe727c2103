"""Built-in feasibility problems for end-to-end runs.

A design ``x`` is feasible (label 1) when its performance value satisfies
``f(x) <= f_thresh`` and every constraint ``g_i(x) <= 0``; otherwise it gets
label 0.  With ``class_thresholds`` set, feasible designs are further
graded: label ``1 + #{t : f(x) <= t}``, infeasible designs stay at 0.

Training rows come from the Sobol sequence and test rows from the Halton
sequence, so the two sets never share a point by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dataio import Dataset
from .errors import ConfigError, GenerationError
from .sampling import SOBOL_MAX_DIMS, halton, sobol

MAX_SHIFTS = 10


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    dims: int
    lower: tuple
    upper: tuple
    performance: Callable
    f_thresh: float
    constraints: tuple = ()
    train_sampler: str = "sobol"
    test_sampler: str = "halton"
    class_thresholds: tuple | None = None
    discrete: dict = field(default_factory=dict)  # column -> number of levels
    imbalance_guard: bool = False
    n_train: int = 500
    n_test: int = 2500

    def __post_init__(self):
        if self.dims < 1 or len(self.lower) != self.dims or len(self.upper) != self.dims:
            raise ConfigError(f"{self.name}: bounds must have one entry per dimension")
        if any(not lo < hi for lo, hi in zip(self.lower, self.upper)):
            raise ConfigError(f"{self.name}: empty box")
        if not np.isfinite(self.f_thresh):
            raise ConfigError(f"{self.name}: threshold must be finite")
        if self.class_thresholds is not None:
            t = np.asarray(self.class_thresholds, dtype=float)
            if not np.isfinite(t).all() or np.any(np.diff(t) <= 0):
                raise ConfigError(f"{self.name}: class thresholds must be finite and increasing")
        for s in (self.train_sampler, self.test_sampler):
            if s not in ("sobol", "halton"):
                raise ConfigError(f"{self.name}: unknown sampler {s!r}")
        if "sobol" in (self.train_sampler, self.test_sampler) and self.dims > SOBOL_MAX_DIMS:
            raise ConfigError(f"{self.name}: Sobol limited to {SOBOL_MAX_DIMS} dimensions")
        if any(k < 2 for k in self.discrete.values()):
            raise ConfigError(f"{self.name}: discrete columns need at least two levels")

    @property
    def n_classes(self) -> int:
        return 2 if self.class_thresholds is None else len(self.class_thresholds) + 2

    def to_design(self, unit: np.ndarray) -> np.ndarray:
        """Map unit-cube points into the box, snapping discrete columns to their grid."""
        u = np.array(unit, dtype=np.float64)
        for j, k in self.discrete.items():
            u[:, j] = np.round(u[:, j] * (k - 1)) / (k - 1)
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        return lo + u * (hi - lo)

    def label(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        f = self.performance(X)
        feasible = f <= self.f_thresh
        for g in self.constraints:
            feasible &= g(X) <= 0
        if self.class_thresholds is None:
            return feasible.astype(np.int64)
        grade = 1 + (f[:, None] <= np.asarray(self.class_thresholds)[None, :]).sum(axis=1)
        return np.where(feasible, grade, 0).astype(np.int64)


def _draw(kind, start, n, dims):
    idx = np.arange(start, start + n)
    return sobol(idx, dims) if kind == "sobol" else halton(idx, dims)


def generate_problem(spec: ProblemSpec, n_train: int | None = None, n_test: int | None = None,
                     seed: int = 0) -> Dataset:
    """Labeled train rows plus a fixed test split.

    Sequence indices depend on ``seed``: train indices start at
    ``seed * n_train`` and test indices at ``1 + seed * n_test``.  If a class
    is missing from the training rows, the training window moves forward by
    ``n_train`` (at most ``MAX_SHIFTS`` times) and the shift is recorded in
    ``Dataset.extra``.
    """
    n_train = spec.n_train if n_train is None else n_train
    n_test = spec.n_test if n_test is None else n_test
    if n_train < spec.n_classes or n_test < 1 or seed < 0:
        raise ConfigError("need n_train >= n_classes, n_test >= 1 and seed >= 0")
    test_start = 1 + seed * n_test
    X_test = spec.to_design(_draw(spec.test_sampler, test_start, n_test, spec.dims))
    for shift in range(MAX_SHIFTS + 1):
        start = (seed + shift) * n_train
        X = spec.to_design(_draw(spec.train_sampler, start, n_train, spec.dims))
        y = spec.label(X)
        if np.bincount(y, minlength=spec.n_classes).min() > 0:
            break
    else:
        raise GenerationError(f"{spec.name}: a class is absent from {n_train} training points")
    extra = {"train_sampler": spec.train_sampler, "train_start": int(start),
             "test_sampler": spec.test_sampler, "test_start": int(test_start)}
    if shift:
        extra["note"] = f"training window shifted {shift} time(s) to include every class"
    return Dataset(spec.name, X, y, spec.n_classes, tuple(sorted(spec.discrete)), spec.imbalance_guard,
                   X_test, spec.label(X_test), None, extra)


# ---------------------------------------------------------------------------
# built-in problems


def _rings_f(X):
    return np.abs(np.hypot(X[:, 0] - 0.5, X[:, 1] - 0.5) - 0.3)


def _box_f(X):
    return (X[:, 0] + X[:, 1] + X[:, 2]) * (0.5 + X[:, 4])


def _box_g1(X):
    return 0.5 - (X[:, 0] + 0.5 * X[:, 1] + 0.25 * X[:, 3]) * (0.5 + X[:, 5])


def _box_g2(X):
    return X[:, 2] - X[:, 0] - 0.3


_NEEDLE_CENTER = np.array([0.6, 0.4, 0.5, 0.5])


def _needle_f(X):
    return ((X - _NEEDLE_CENTER) ** 2).sum(axis=1)


def _needle_g(X):
    return X[:, 0] - X[:, 1] - 0.3


BUILTIN = {
    # balanced annulus in the unit square
    "rings2d": ProblemSpec("rings2d", 2, (0.0, 0.0), (1.0, 1.0), _rings_f, 0.13,
                           n_train=500, n_test=2500),
    # linear-ish constraints, two five-level discrete columns, ~34% feasible
    "box6d": ProblemSpec("box6d", 6, (0.0,) * 6, (1.0,) * 6, _box_f, 1.55, (_box_g1, _box_g2),
                         discrete={4: 5, 5: 5}, n_train=1000, n_test=2500),
    # small feasible ball cut by a half-space, ~2.7% feasible
    "needle4d": ProblemSpec("needle4d", 4, (0.0,) * 4, (1.0,) * 4, _needle_f, 0.09, (_needle_g,),
                            imbalance_guard=True, n_train=1000, n_test=2500),
}


def builtin_problem(name: str) -> ProblemSpec:
    try:
        return BUILTIN[name]
    except KeyError:
        raise ConfigError(f"unknown built-in problem {name!r}; choose from {sorted(BUILTIN)}") from None
