"""Synthetic task prior for meta-training.

Each task is drawn from a random scoring network: inputs are sampled
(Gaussian or uniform per feature, some optionally quantized to a grid),
pushed through a random MLP to a scalar score, and the score is cut into
classes at random quantiles.  Labels are then flipped with a small noise
probability and the features are standardized and randomly re-scaled.

All randomness comes from numpy's counter-based Philox bit generator, so a
``(config, seed)`` pair produces the same task stream on every platform
that runs the same numpy release.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, GenerationError

MAX_ATTEMPTS = 100
ACTIVATIONS = ("tanh", "relu", "sin")
_UNIFORM_HALF_WIDTH = np.sqrt(3.0)
# grid extent used when quantizing a Gaussian feature
_GAUSS_SPAN = 2.5


def make_rng(seed, *stream) -> np.random.Generator:
    """Philox generator keyed by ``seed`` and an optional stream id."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


@dataclass
class PriorConfig:
    features: tuple = (1, 20)
    classes: tuple = (2, 4)
    rows: tuple = (16, 1024)
    depth: tuple = (1, 3)
    width: tuple = (4, 32)
    noise: tuple = (0.0, 0.1)
    gaussian_weight: float = 0.5
    quantize_prob: float = 0.2
    score: str = "mlp"
    class_weights: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("features", "classes", "rows", "depth", "width", "noise"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"prior range {name}={lo, hi} is empty")
            setattr(self, name, (lo, hi))
        if self.features[0] < 1:
            raise ConfigError("tasks need at least one feature")
        if self.classes[0] < 2 or self.classes[1] > 10:
            raise ConfigError("class range must lie within [2, 10]")
        if self.rows[0] < 2 * self.classes[1]:
            raise ConfigError("minimum task size too small for two rows per class")
        if self.depth[0] < 1 or self.width[0] < 1:
            raise ConfigError("generator depth and width must be >= 1")
        if not (0.0 <= self.noise[0] and self.noise[1] < 1.0):
            raise ConfigError("label noise must lie in [0, 1)")
        if self.score not in ("mlp", "linear"):
            raise ConfigError(f"unknown score kind {self.score!r}")
        if self.class_weights is not None:
            w = tuple(float(x) for x in self.class_weights)
            if len(w) != self.classes[1] - self.classes[0] + 1 or min(w) < 0 or sum(w) <= 0:
                raise ConfigError("class_weights needs one non-negative weight per class count")
            self.class_weights = w

    @classmethod
    def linear(cls, **overrides) -> "PriorConfig":
        """Binary tasks with a linear decision boundary."""
        base = dict(score="linear", classes=(2, 2), depth=(1, 1), quantize_prob=0.0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        known = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        unknown = set(known) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown prior fields: {sorted(unknown)}")
        return cls(**known)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def class_probabilities(self) -> dict[int, float]:
        counts = range(self.classes[0], self.classes[1] + 1)
        w = self.class_weights or (1.0,) * len(counts)
        total = sum(w)
        return {c: wi / total for c, wi in zip(counts, w)}

    def check_capacity(self, model_cfg) -> None:
        if self.features[1] > model_cfg.max_features:
            raise ConfigError("prior draws more features than the model supports")
        if self.classes[1] > model_cfg.max_classes:
            raise ConfigError("prior draws more classes than the model supports")


@dataclass
class TaskMeta:
    """Everything needed to recompute noise-free labels for new inputs."""

    generator_seed: int
    n_classes: int
    layers: list  # [(W, b), ...]; hidden layers use ``activation``
    activation: str
    quantized: dict  # column -> (lo, hi, levels)
    thresholds: np.ndarray
    noise: float
    mean: np.ndarray
    std: np.ndarray
    scale: np.ndarray
    shift: np.ndarray
    flipped: np.ndarray = field(default=None, repr=False)


@dataclass
class SyntheticTask:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    meta: TaskMeta


def _activate(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.sin(z)


def _score(meta_layers, activation, X):
    h = X
    for i, (W, b) in enumerate(meta_layers):
        h = h @ W + b
        if i < len(meta_layers) - 1:
            h = _activate(activation, h)
    return h[:, 0]


def _quantize(X, quantized):
    X = X.copy()
    for j, (lo, hi, k) in quantized.items():
        step = (hi - lo) / (k - 1)
        X[:, j] = lo + step * np.clip(np.rint((X[:, j] - lo) / step), 0, k - 1)
    return X


def assign_classes(scores, n_classes: int, rng=None, levels=None):
    """Cut ``scores`` into ``n_classes`` contiguous classes.

    Cut positions come from ``levels`` (cumulative class proportions, length
    ``n_classes - 1``) or from a Dirichlet draw.  Each threshold sits halfway
    between the two sorted scores around its cut, so higher scores never get
    a lower class.  Returns ``(labels, thresholds)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if n_classes < 2:
        raise GenerationError("need at least two classes")
    if not np.isfinite(scores).all():
        raise GenerationError("non-finite scores")
    s = np.sort(scores)
    gaps = np.flatnonzero(s[1:] > s[:-1]) + 1
    if gaps.size == 0:
        raise GenerationError("all scores are equal")
    if levels is None:
        levels = np.cumsum(rng.dirichlet(np.full(n_classes, 2.0)))[:-1]
    levels = np.asarray(levels, dtype=np.float64)
    if levels.shape != (n_classes - 1,):
        raise GenerationError("need one cut level per class boundary")
    thresholds = []
    for lev in levels:
        j = int(np.clip(np.rint(lev * len(s)), 1, len(s) - 1))
        g = gaps[np.argmin(np.abs(gaps - j))]
        thresholds.append(0.5 * (s[g - 1] + s[g]))
    thresholds = np.asarray(thresholds)
    return np.searchsorted(thresholds, scores, side="left"), thresholds


def _draw_task(cfg: PriorConfig, rng, n_rows):
    probs = cfg.class_probabilities()
    d = int(rng.integers(cfg.features[0], cfg.features[1] + 1))
    C = int(rng.choice(list(probs), p=list(probs.values())))
    n = int(n_rows) if n_rows is not None else int(rng.integers(cfg.rows[0], cfg.rows[1] + 1))
    gen_seed = int(rng.integers(0, 2**63 - 1))
    g = make_rng(gen_seed)

    depth = 1 if cfg.score == "linear" else int(g.integers(cfg.depth[0], cfg.depth[1] + 1))
    width = int(g.integers(cfg.width[0], cfg.width[1] + 1))
    dims = [d] + [width] * (depth - 1) + [1]
    layers = []
    for i in range(depth):
        W = g.standard_normal((dims[i], dims[i + 1])) / np.sqrt(dims[i])
        b = g.normal(0.0, 0.5, dims[i + 1]) if i < depth - 1 else np.zeros(1)
        if i < depth - 1:
            W *= 2.0
        layers.append((W, b))
    activation = ACTIVATIONS[int(g.integers(len(ACTIVATIONS)))]

    gauss = g.random(d) < cfg.gaussian_weight
    X = np.where(gauss, g.standard_normal((n, d)), g.uniform(-_UNIFORM_HALF_WIDTH, _UNIFORM_HALF_WIDTH, (n, d)))
    quantized = {}
    if g.random() < cfg.quantize_prob:
        for j in np.flatnonzero(g.random(d) < 0.5):
            span = _GAUSS_SPAN if gauss[j] else _UNIFORM_HALF_WIDTH
            quantized[int(j)] = (-span, span, int(g.integers(2, 11)))
    X = _quantize(X, quantized)

    scores = _score(layers, activation, X)
    y, thresholds = assign_classes(scores, C, g)
    noise = float(g.uniform(cfg.noise[0], cfg.noise[1]))
    flipped = g.random(n) < noise
    y = np.where(flipped, (y + g.integers(1, C, n)) % C, y)
    if np.bincount(y, minlength=C).min() < 2:
        return None

    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    scale = np.exp(g.uniform(np.log(0.1), np.log(10.0), d))
    shift = g.normal(0.0, 2.0, d)
    X_out = (X - mean) / std * scale + shift
    meta = TaskMeta(gen_seed, C, layers, activation, quantized, thresholds, noise,
                    mean, std, scale, shift, flipped)
    return SyntheticTask(X_out, y.astype(np.int64), C, meta)


def sample_task(cfg: PriorConfig, rng: np.random.Generator, n_rows: int | None = None) -> SyntheticTask:
    """Draw one task; ``n_rows`` overrides the configured size range."""
    for _ in range(MAX_ATTEMPTS):
        try:
            task = _draw_task(cfg, rng, n_rows)
        except GenerationError:
            continue
        if task is not None:
            return task
    raise GenerationError(f"no valid task after {MAX_ATTEMPTS} attempts")


def task_stream(cfg: PriorConfig, stream: int = 0):
    """Endless reproducible task iterator for ``cfg.seed``."""
    rng = make_rng(cfg.seed, stream)
    while True:
        yield sample_task(cfg, rng)


def bayes_oracle(meta: TaskMeta, X_query) -> np.ndarray:
    """Noise-free labels of ``X_query`` under the task's own generator."""
    X = (np.asarray(X_query, dtype=np.float64) - meta.shift) / meta.scale * meta.std + meta.mean
    X = _quantize(X, meta.quantized)
    return np.searchsorted(meta.thresholds, _score(meta.layers, meta.activation, X), side="left")
