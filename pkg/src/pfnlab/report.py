"""Summaries of benchmark records: ranks, data efficiency and Pareto tables."""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from .protocol import FRACTIONS
from .stats import auc_trapezoid, data_efficiency, pareto_rank, rank_summary


def _get(r, k):
    return r[k] if isinstance(r, dict) else getattr(r, k)


def _ok_rows(records):
    out = []
    for r in records:
        if _get(r, "status") != "ok":
            continue
        d = {k: _get(r, k) for k in ("dataset", "method", "split", "fraction", "n_train", "f1")}
        d["total_seconds"] = _get(r, "total_seconds")
        out.append(d)
    return out


def score_table(records, metric: str = "f1"):
    """``(blocks, methods, matrix)`` with one row per (dataset, split, fraction).

    Blocks missing a method (skipped or failed record) are dropped.
    """
    rows = _ok_rows(records)
    methods = sorted({r["method"] for r in rows})
    cells = defaultdict(dict)
    for r in rows:
        cells[(r["dataset"], r["split"], r["fraction"])][r["method"]] = r[metric]
    blocks = sorted(b for b, v in cells.items() if len(v) == len(methods))
    matrix = np.array([[cells[b][m] for m in methods] for b in blocks], dtype=np.float64).reshape(len(blocks), len(methods))
    return blocks, methods, matrix


def summarize_ranks(records, alpha: float = 0.05) -> dict:
    """Rank summaries for F1 (higher better) and total time (lower better)."""
    out = {}
    for metric, higher in (("f1", True), ("total_seconds", False)):
        blocks, methods, matrix = score_table(records, metric)
        if len(methods) < 2 or len(blocks) == 0:
            out[metric] = None
            continue
        out[metric] = rank_summary(matrix, methods, higher_better=higher, alpha=alpha).to_dict()
    return out


def _curves(records):
    """(dataset, split) -> method -> sorted [(fraction, n_train, f1, seconds)]."""
    cur = defaultdict(lambda: defaultdict(list))
    for r in _ok_rows(records):
        cur[(r["dataset"], r["split"])][r["method"]].append(
            (r["fraction"], r["n_train"], r["f1"], r["total_seconds"]))
    for per in cur.values():
        for v in per.values():
            v.sort()
    return cur


def efficiency_table(records, threshold: float = 0.9) -> dict:
    """Mean relative data efficiency per dataset and method (averaged over splits).

    Splits where a method lacks a complete curve are left out for all
    methods of that split.  Per-split values, including zeros for methods
    that never reach the threshold, are averaged.
    """
    per = defaultdict(lambda: defaultdict(list))
    for (ds, split), methods in sorted(_curves(records).items()):
        lengths = {len(v) for v in methods.values()}
        if len(lengths) != 1:
            continue
        curves = {m: [c[2] for c in v] for m, v in methods.items()}
        counts = [c[1] for c in next(iter(methods.values()))]
        if any(np.diff(counts) <= 0):
            # duplicate prefix sizes (tiny datasets): keep first occurrence
            keep = np.concatenate([[True], np.diff(counts) > 0])
            counts = list(np.asarray(counts)[keep])
            curves = {m: list(np.asarray(v)[keep]) for m, v in curves.items()}
        res = data_efficiency(curves, counts, threshold_ratio=threshold)
        for m, rec in res.items():
            per[ds][m].append(rec.eta)
    return {ds: {m: float(np.mean(v)) for m, v in sorted(ms.items())} for ds, ms in sorted(per.items())}


def pareto_table(records, log_time: bool = False) -> dict:
    """Per dataset and method: mean F1-AUC, mean time-AUC and mean Pareto rank over splits."""
    acc = defaultdict(lambda: defaultdict(lambda: {"f1_auc": [], "time_auc": [], "rank": []}))
    for (ds, split), methods in sorted(_curves(records).items()):
        names = sorted(methods)
        points = []
        for m in names:
            v = methods[m]
            frac = [c[0] / 100 for c in v]
            if len(frac) < 2:
                break
            points.append((auc_trapezoid(frac, [c[2] for c in v]),
                           auc_trapezoid(frac, [c[3] for c in v], log=log_time)))
        else:
            ranks = pareto_rank(points)
            for m, (f, t), rk in zip(names, points, ranks):
                acc[ds][m]["f1_auc"].append(f)
                acc[ds][m]["time_auc"].append(t)
                acc[ds][m]["rank"].append(int(rk))
    return {ds: {m: {k: float(np.mean(v)) for k, v in d.items()} for m, d in sorted(ms.items())}
            for ds, ms in sorted(acc.items())}


def learning_curves(records) -> dict:
    """dataset -> method -> {fraction: mean F1 over splits}."""
    vals = defaultdict(lambda: defaultdict(lambda: defaultdict(list)))
    for r in _ok_rows(records):
        vals[r["dataset"]][r["method"]][r["fraction"]].append(r["f1"])
    return {ds: {m: {f: float(np.mean(v)) for f, v in sorted(fs.items())} for m, fs in sorted(ms.items())}
            for ds, ms in sorted(vals.items())}


def build_summary(records, alpha: float = 0.05, efficiency_threshold: float = 0.9, log_time: bool = False) -> dict:
    statuses = defaultdict(int)
    for r in records:
        statuses[_get(r, "status")] += 1
    return {
        "records": len(records),
        "status_counts": dict(sorted(statuses.items())),
        "fractions": list(FRACTIONS),
        "ranks": summarize_ranks(records, alpha),
        "data_efficiency": efficiency_table(records, efficiency_threshold),
        "pareto": pareto_table(records, log_time),
        "learning_curves": learning_curves(records),
        "settings": {"alpha": alpha, "efficiency_threshold": efficiency_threshold, "log_time_auc": log_time},
    }


def format_summary(summary: dict) -> str:
    """Plain-text tables for terminals and logs."""
    lines = [f"records: {summary['records']}  {summary['status_counts']}"]
    for metric, rs in summary["ranks"].items():
        if rs is None:
            continue
        lines.append("")
        lines.append(f"average rank by {metric} over {rs['n_blocks']} blocks")
        fr = rs["friedman"]
        if fr["statistic"] is not None:
            lines.append(f"  Friedman chi2 = {fr['statistic']:.3f}, p = {fr['p']:.3g}")
        for m, r in sorted(rs["avg_ranks"].items(), key=lambda kv: kv[1]):
            lines.append(f"  {m:<8} {r:6.3f}")
        lines.append("  indistinguishable groups: " + "; ".join("{" + ", ".join(g) + "}" for g in rs["groups"]))
    lines.append("")
    lines.append("relative data efficiency (mean over splits)")
    for ds, ms in summary["data_efficiency"].items():
        lines.append(f"  {ds:<10} " + "  ".join(f"{m}={v:6.1%}" for m, v in ms.items()))
    lines.append("")
    lines.append("Pareto (F1-AUC, time-AUC, mean rank)")
    for ds, ms in summary["pareto"].items():
        for m, d in ms.items():
            lines.append(f"  {ds:<10} {m:<8} {d['f1_auc']:.4f}  {d['time_auc']:.4g}s  {d['rank']:.2f}")
    return "\n".join(lines) + "\n"
