"""Meta-training loop.

Every step draws a batch of synthetic tasks that share one row count,
cuts each task at a random position into labeled context and query rows,
and takes one Adam step on the query cross-entropy.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .checkpoint import save_checkpoint
from .errors import ConfigError, NumericAbort, NumericError
from .model import Checkpoint, ContextBatch, ModelConfig, init_params, loss_and_grads, pad_batch, predict
from .prior import PriorConfig, bayes_oracle, make_rng, sample_task
from .stats import accuracy, f1_macro

log = logging.getLogger(__name__)

TRAIN_STREAM = 0
EVAL_STREAM = 1


@dataclass
class TrainConfig:
    """Optimization settings.

    ``rows`` overrides the prior's task-size range during training (useful
    to keep steps cheap); ``None`` uses the prior's own range.
    """

    steps: int = 2000
    batch_size: int = 8
    split: tuple = (0.25, 0.75)
    lr: float = 3e-4
    warmup: int = 200
    min_lr_ratio: float = 0.1
    grad_clip: float = 1.0
    rows: tuple | None = None
    log_interval: int = 100
    eval_tasks: int = 16
    eval_rows: tuple = (64, 64)
    checkpoint_interval: int = 0
    seed: int = 0

    def __post_init__(self):
        self.split = tuple(self.split)
        if self.rows is not None:
            self.rows = tuple(self.rows)
        self.eval_rows = tuple(self.eval_rows)
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        lo, hi = self.split
        if not (0.0 < lo <= hi < 1.0):
            raise ConfigError("split bounds must satisfy 0 < lo <= hi < 1")
        if self.lr < 0 or self.warmup < 0 or not (0.0 <= self.min_lr_ratio <= 1.0):
            raise ConfigError("invalid learning-rate schedule")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or None")
        if self.rows is not None and (self.rows[0] < 2 or self.rows[0] > self.rows[1]):
            raise ConfigError("rows range must satisfy 2 <= lo <= hi")
        if self.log_interval < 1 or self.checkpoint_interval < 0:
            raise ConfigError("intervals must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` then cosine decay to ``lr * min_lr_ratio``.

    ``step`` counts from 0.
    """
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(cfg.steps - cfg.warmup, 1)
    t = min((step - cfg.warmup) / span, 1.0)
    floor = cfg.lr * cfg.min_lr_ratio
    return floor + 0.5 * (cfg.lr - floor) * (1.0 + math.cos(math.pi * t))


@dataclass
class TrainLog:
    """Per-interval records: ``step``, mean ``loss``, ``holdout_acc``, ``seconds``."""

    rows: list = field(default_factory=list)

    def append(self, step, loss, holdout_acc, seconds):
        if self.rows and step <= self.rows[-1]["step"]:
            raise ValueError("log steps must increase")
        if not math.isfinite(loss):
            raise NumericError("non-finite loss in training log")
        self.rows.append({"step": int(step), "loss": float(loss),
                          "holdout_acc": float(holdout_acc), "seconds": float(seconds)})

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "loss", "holdout_acc", "seconds"])
            w.writeheader()
            w.writerows(self.rows)

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        out = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                out.append(int(r["step"]), float(r["loss"]), float(r["holdout_acc"]), float(r["seconds"]))
        return out


def cut_task(task, cut: int):
    """Split a task into ``(X_train, y_train, X_query, y_query, n_classes)``."""
    n = len(task.y)
    if not 1 <= cut <= n - 1:
        raise ConfigError(f"cut {cut} must leave a labeled and a query row (n={n})")
    return task.X[:cut], task.y[:cut], task.X[cut:], task.y[cut:], task.n_classes


def draw_batch(prior: PriorConfig, cfg: TrainConfig, rng):
    """Sample ``batch_size`` tasks with a shared row count and per-task cuts."""
    lo, hi = cfg.rows if cfg.rows is not None else prior.rows
    n = int(rng.integers(lo, hi + 1))
    tasks = [sample_task(prior, rng, n_rows=n) for _ in range(cfg.batch_size)]
    c_lo = max(1, math.ceil(cfg.split[0] * n))
    c_hi = min(n - 1, max(c_lo, math.floor(cfg.split[1] * n)))
    cuts = rng.integers(c_lo, c_hi + 1, size=len(tasks))
    return tasks, [int(c) for c in cuts]


def _clip(grads: dict, max_norm) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        scale = np.float32(max_norm / total)
        for g in grads.values():
            g *= scale
    return total


def training_step(params: dict, model_cfg: ModelConfig, tasks, cuts, opt: nn.AdamState,
                  lr: float | None = None, grad_clip: float | None = 1.0, context: dict | None = None) -> float:
    """One optimization step; returns the batch mean query loss.

    Raises
    ------
    NumericAbort
        Loss or gradient is not finite.  The diagnostic carries the step
        counter, ``context`` and the generator seed of each task.
    """
    pb = pad_batch([cut_task(t, c) for t, c in zip(tasks, cuts)], model_cfg)

    def abort(reason):
        diag = dict(context or {}, step=opt.step, reason=reason,
                    tasks=[{"generator_seed": t.meta.generator_seed, "n_classes": t.n_classes,
                            "rows": len(t.y), "cut": c} for t, c in zip(tasks, cuts)])
        return NumericAbort(f"training aborted at step {opt.step}: {reason}", diag)

    try:
        loss, grads = loss_and_grads(params, model_cfg, pb)
    except NumericError as exc:
        raise abort(str(exc)) from exc
    if not math.isfinite(loss):
        raise abort("non-finite loss")
    norm = _clip(grads, grad_clip)
    if not math.isfinite(norm):
        raise abort("non-finite gradient")
    nn.adam_step(params, grads, opt, lr)
    return loss


@dataclass
class EvalResult:
    accuracy: float
    accuracy_se: float
    f1_macro: float
    f1_se: float
    oracle_accuracy: float
    n_tasks: int


def held_out_eval(ckpt: Checkpoint, prior: PriorConfig, n_tasks: int = 200, context_size: int = 64,
                  query_size: int = 64, seed: int | None = None) -> EvalResult:
    """In-context accuracy on fresh prior tasks.

    Tasks come from an evaluation stream disjoint from the training stream
    of the same seeds.  The oracle column scores the task's noise-free
    generator against the same (noisy) query labels.
    """
    seed = ckpt.seed if seed is None else seed
    rng = make_rng(seed, prior.seed, EVAL_STREAM)
    accs, f1s, oracle = [], [], []
    for _ in range(n_tasks):
        task = sample_task(prior, rng, n_rows=context_size + query_size)
        X_tr, y_tr, X_q, y_q, c = cut_task(task, context_size)
        pred = predict(ContextBatch(X_tr, y_tr, X_q), ckpt, n_classes=c)
        accs.append(accuracy(y_q, pred))
        f1s.append(f1_macro(y_q, pred, c))
        oracle.append(accuracy(y_q, bayes_oracle(task.meta, X_q)))

    def se(v):
        return float(np.std(v, ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0

    return EvalResult(float(np.mean(accs)), se(accs), float(np.mean(f1s)), se(f1s),
                      float(np.mean(oracle)), n_tasks)


def meta_train(cfg: TrainConfig, prior: PriorConfig, model_cfg: ModelConfig | None = None,
               out_dir=None, progress=None):
    """Train a model from scratch; returns ``(Checkpoint, TrainLog)``.

    With ``out_dir`` set, the final checkpoint is written to
    ``out_dir/model.pfn`` and the log to ``out_dir/train_log.csv``;
    periodic checkpoints go to ``out_dir/step_XXXXXXX.pfn``.
    ``steps=0`` returns the initialization.
    """
    model_cfg = model_cfg or ModelConfig()
    prior.check_capacity(model_cfg)
    if cfg.rows is not None and cfg.rows[1] > model_cfg.max_context:
        raise ConfigError("training rows exceed the model context capacity")
    if cfg.rows is None and prior.rows[1] > model_cfg.max_context:
        raise ConfigError("prior rows exceed the model context capacity")
    params = init_params(model_cfg, cfg.seed)
    opt = nn.AdamState(lr=cfg.lr)
    rng = make_rng(cfg.seed, prior.seed, TRAIN_STREAM)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    tlog = TrainLog()
    t0 = time.perf_counter()
    window = []
    context = {"seed": cfg.seed, "prior": prior.fingerprint()}

    def snapshot(steps):
        return Checkpoint(model_cfg, {k: v.copy() for k, v in params.items()},
                          prior.fingerprint(), cfg.seed, steps).frozen()

    for step in range(cfg.steps):
        tasks, cuts = draw_batch(prior, cfg, rng)
        loss = training_step(params, model_cfg, tasks, cuts, opt, learning_rate(step, cfg),
                             cfg.grad_clip, context)
        window.append(loss)
        done = step + 1
        if done % cfg.log_interval == 0 or done == cfg.steps:
            ev = held_out_eval(snapshot(done), prior, cfg.eval_tasks, *cfg.eval_rows, seed=cfg.seed)
            tlog.append(done, float(np.mean(window)), ev.accuracy, time.perf_counter() - t0)
            window = []
            log.info("step %d loss %.4f holdout_acc %.3f", done, tlog.rows[-1]["loss"], ev.accuracy)
            if progress is not None:
                progress(tlog.rows[-1])
        if out is not None and cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0:
            save_checkpoint(snapshot(done), out / f"step_{done:07d}.pfn")

    ckpt = snapshot(cfg.steps)
    if out is not None:
        save_checkpoint(ckpt, out / "model.pfn")
        tlog.write_csv(out / "train_log.csv")
    return ckpt, tlog
