"""Command-line entry point ``pfnlab``.

Exit codes: 0 success, 2 configuration/input error, 3 runtime fault,
4 numeric abort during training.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .baselines import KnnMethod, TreeMethod, TuneBudget
from .checkpoint import load_checkpoint
from .dataio import Dataset, load_csv_dataset, load_report, save_csv_dataset, save_json, save_report
from .errors import ConfigError, CorruptionError, NumericAbort, ParseError, PfnError
from .model import ModelConfig, predict_proba_chunked
from .prior import PriorConfig
from .problems import BUILTIN, builtin_problem, generate_problem
from .protocol import FRACTIONS, PfnMethod, preprocess, run_benchmark
from .report import build_summary, format_summary
from .train import TrainConfig, meta_train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_NUMERIC = 0, 2, 3, 4
log = logging.getLogger("pfnlab")


def _load_config(path) -> tuple[dict, Path]:
    if path is None:
        return {}, Path.cwd()
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data, path.parent


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, config: dict, seed, outputs) -> Path:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": seed,
        "config": config,
        "outputs": {p.name: _sha256(p) for p in outputs if p.exists()},
    }
    return save_json(manifest, out / "manifest.json")


def _section(cfg: dict, key: str) -> dict:
    v = cfg.get(key) or {}
    if not isinstance(v, dict):
        raise ConfigError(f"config section {key!r} must be a mapping")
    return dict(v)


def _prior_from(section: dict) -> PriorConfig:
    preset = section.pop("preset", "mlp")
    if preset not in ("mlp", "linear"):
        raise ConfigError(f"unknown prior preset {preset!r}")
    if preset == "linear":
        section = PriorConfig.linear().to_dict() | section
    return PriorConfig.from_dict(section)


def cmd_meta_train(args) -> int:
    cfg, _ = _load_config(args.config)
    prior_sec = _section(cfg, "prior")
    preset = prior_sec.get("preset", "mlp")
    prior = _prior_from(prior_sec)
    train_sec = _section(cfg, "train")
    if args.steps is not None:
        train_sec["steps"] = args.steps
    if args.seed is not None:
        train_sec["seed"] = args.seed
    tcfg = TrainConfig.from_dict(train_sec)
    try:
        mcfg = ModelConfig(**_section(cfg, "model"))
    except TypeError as exc:
        raise ConfigError(f"model section: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"prior": prior.to_dict() | {"preset": preset}, "train": tcfg.to_dict(), "model": mcfg.to_dict()}
    ckpt, tlog = meta_train(tcfg, prior, mcfg, out_dir=out,
                            progress=lambda r: print(
                                f"step {r['step']:>6}  loss {r['loss']:.4f}  holdout_acc {r['holdout_acc']:.3f}  "
                                f"{r['seconds']:.0f}s", flush=True))
    outputs = [out / "model.pfn", out / "train_log.csv"]
    _write_manifest(out, "meta-train", resolved, tcfg.seed, outputs)
    print(f"wrote {out / 'model.pfn'} ({ckpt.steps} steps)")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg, _ = _load_config(args.config)
    names = args.problem or cfg.get("problems") or sorted(BUILTIN)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name in names:
        spec = builtin_problem(name)
        ds = generate_problem(spec, args.n_train or cfg.get("n_train"), args.n_test or cfg.get("n_test"), seed)
        path = save_csv_dataset(ds, out / f"{name}.csv")
        outputs += [path, path.with_suffix(".json"), path.with_name(f"{name}_test.csv")]
        print(f"wrote {path}: {len(ds.y)} train / {len(ds.y_test)} test rows, "
              f"positive rate {np.mean(ds.y == 1):.3f}")
    _write_manifest(out, "gen-data", {"problems": list(names), "n_train": args.n_train,
                                      "n_test": args.n_test}, seed, outputs)
    return EXIT_OK


def _resolve_dataset(entry, base: Path) -> Dataset:
    if isinstance(entry, str) and entry in BUILTIN:
        return generate_problem(builtin_problem(entry), seed=0)
    if isinstance(entry, dict) and "builtin" in entry:
        return generate_problem(builtin_problem(entry["builtin"]), entry.get("n_train"), entry.get("n_test"),
                                int(entry.get("seed", 0)))
    path = entry["csv"] if isinstance(entry, dict) else entry
    path = Path(path)
    if not path.is_absolute():
        path = base / path
    if not path.exists():
        raise ConfigError(f"dataset {path} not found")
    meta = entry.get("meta") if isinstance(entry, dict) else None
    return load_csv_dataset(path, None if meta is None else base / meta)


def cmd_bench(args) -> int:
    cfg, base = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    workers = args.workers if args.workers is not None else int(cfg.get("workers", 1))
    method_names = cfg.get("methods", ["PFN", "KNN", "DT"])
    n_reps = int(cfg.get("n_reps", 20))
    tune_sec = _section(cfg, "tune")
    budget = TuneBudget(int(tune_sec.get("folds", 5)), int(tune_sec.get("max_configs", 100)))
    methods = []
    resolved_ckpt = None
    for name in method_names:
        if name == "PFN":
            ck = args.checkpoint or cfg.get("checkpoint")
            if ck is None:
                raise ConfigError("the PFN method needs a checkpoint (config 'checkpoint' or --checkpoint)")
            ck = Path(ck) if Path(ck).is_absolute() or args.checkpoint else base / ck
            if not ck.exists():
                raise ConfigError(f"checkpoint {ck} not found")
            resolved_ckpt = str(ck)
            methods.append(PfnMethod(load_checkpoint(ck)))
        elif name == "KNN":
            methods.append(KnnMethod(budget))
        elif name == "DT":
            methods.append(TreeMethod(budget))
        else:
            raise ConfigError(f"unknown method {name!r}; choose from PFN, KNN, DT")
    entries = cfg.get("datasets", sorted(BUILTIN))
    datasets = [_resolve_dataset(e, base) for e in entries]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    records = run_benchmark(datasets, methods, n_reps, seed, workers)
    elapsed = time.perf_counter() - t0
    report_path = save_report(records, out / "report.csv")
    summary = build_summary(records, args.alpha, args.efficiency_threshold, args.log_time)
    summary["datasets"] = {ds.name: {"n_rows": len(ds.y), "n_features": ds.n_features, "n_classes": ds.n_classes,
                                     "fixed_test": ds.has_fixed_test} for ds in datasets}
    stats_path = save_json(summary, out / "stats.json")
    text_path = out / "summary.txt"
    text_path.write_text(format_summary(summary))
    resolved = {"datasets": entries, "methods": method_names, "n_reps": n_reps, "checkpoint": resolved_ckpt,
                "tune": {"folds": budget.folds, "max_configs": budget.max_configs}, "workers": workers,
                "alpha": args.alpha, "efficiency_threshold": args.efficiency_threshold,
                "log_time": args.log_time, "fractions": list(FRACTIONS)}
    _write_manifest(out, "bench", resolved, seed, [report_path, stats_path, text_path])
    print(format_summary(summary), end="")
    print(f"{len(records)} records in {elapsed:.1f}s -> {report_path}")
    return EXIT_OK


def _read_query_csv(path: Path, n_features: int) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    width = n_features + 1 if header and header[-1] == "label" else n_features
    if len(header) != width:
        raise ParseError(f"{path}: expected {n_features} feature columns")
    try:
        X = np.array([[float(v) for v in r[:n_features]] for r in rows[1:] if r], dtype=np.float64)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if not np.isfinite(X).all():
        raise ParseError(f"{path}: non-finite value")
    return X.reshape(-1, n_features)


def cmd_predict(args) -> int:
    ck = Path(args.checkpoint)
    if not ck.exists():
        raise ConfigError(f"checkpoint {ck} not found")
    ckpt = load_checkpoint(ck)
    train = load_csv_dataset(args.train)
    Xq = _read_query_csv(Path(args.query), train.n_features)
    prep = preprocess(train.X, train.y, Xq)
    probs = predict_proba_chunked(prep.X_train, prep.y_train, prep.X_test, ckpt, len(prep.classes))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"p_{c}" for c in prep.classes] + ["prediction"])
        for row in probs:
            w.writerow([repr(float(v)) for v in row] + [int(prep.classes[int(np.argmax(row))])])
    print(f"wrote {len(probs)} predictions to {out}")
    return EXIT_OK


def cmd_stats(args) -> int:
    records = load_report(args.report)
    summary = build_summary(records, args.alpha, args.efficiency_threshold, args.log_time)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stats_path = save_json(summary, out / "stats.json")
    text_path = out / "summary.txt"
    text_path.write_text(format_summary(summary))
    _write_manifest(out, "stats", {"report": str(args.report), "alpha": args.alpha,
                                   "efficiency_threshold": args.efficiency_threshold,
                                   "log_time": args.log_time}, None, [stats_path, text_path])
    print(format_summary(summary), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    """Plot-ready CSVs (learning curves, Pareto table) from a report."""
    records = load_report(args.report)
    summary = build_summary(records, args.alpha, args.efficiency_threshold, args.log_time)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curves = out / "learning_curves.csv"
    with open(curves, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "method", "fraction", "mean_f1"])
        for ds, ms in summary["learning_curves"].items():
            for m, fs in ms.items():
                for f, v in fs.items():
                    w.writerow([ds, m, f, repr(v)])
    pareto = out / "pareto.csv"
    with open(pareto, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "method", "f1_auc", "time_auc", "pareto_rank"])
        for ds, ms in summary["pareto"].items():
            for m, d in ms.items():
                w.writerow([ds, m, repr(d["f1_auc"]), repr(d["time_auc"]), repr(d["rank"])])
    eff = out / "data_efficiency.csv"
    with open(eff, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "method", "efficiency"])
        for ds, ms in summary["data_efficiency"].items():
            for m, v in ms.items():
                w.writerow([ds, m, repr(v)])
    _write_manifest(out, "report", {"report": str(args.report), "alpha": args.alpha,
                                    "efficiency_threshold": args.efficiency_threshold,
                                    "log_time": args.log_time}, None, [curves, pareto, eff])
    print(format_summary(summary), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pfnlab", description="Meta-train a PFN classifier and benchmark it.")
    p.add_argument("--version", action="version", version=f"pfnlab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--seed", type=int, help="global seed (overrides config)")
        sp.add_argument("--out", default=out_default, help="output directory")

    def analysis(sp):
        sp.add_argument("--alpha", type=float, default=0.05, help="significance level")
        sp.add_argument("--efficiency-threshold", type=float, default=0.9,
                        help="fraction of the best score defining the data-efficiency threshold")
        sp.add_argument("--log-time", action="store_true", help="integrate time curves in log10 space")

    sp = sub.add_parser("meta-train", help="meta-train a checkpoint on a synthetic prior")
    common(sp, "runs/train")
    sp.add_argument("--steps", type=int, help="override train.steps")
    sp.set_defaults(func=cmd_meta_train)

    sp = sub.add_parser("gen-data", help="write built-in toy datasets as CSV")
    common(sp, "data")
    sp.add_argument("--problem", action="append", choices=sorted(BUILTIN), help="repeatable; default all")
    sp.add_argument("--n-train", type=int)
    sp.add_argument("--n-test", type=int)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("bench", help="run the benchmark protocol")
    common(sp, "runs/bench")
    sp.add_argument("--workers", type=int, help="worker processes")
    sp.add_argument("--checkpoint", help="PFN checkpoint (overrides config)")
    analysis(sp)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("predict", help="class probabilities for query rows")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--train", required=True, help="labeled dataset CSV (with JSON sidecar)")
    sp.add_argument("--query", required=True, help="CSV of query rows (label column optional)")
    sp.add_argument("--out", default="predictions.csv")
    sp.set_defaults(func=cmd_predict)

    for name, fn, helptext in (("stats", cmd_stats, "recompute statistics from a report"),
                               ("report", cmd_report, "write plot-ready CSV tables from a report")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--report", required=True, help="report.csv from bench")
        sp.add_argument("--out", default="runs/" + name)
        analysis(sp)
        sp.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        if exc.diagnostic:
            print(json.dumps(exc.diagnostic, default=str), file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ParseError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PfnError, CorruptionError, OSError, ValueError, ArithmeticError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
