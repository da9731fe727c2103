"""Dataset container and flat-file formats (dataset CSV + JSON sidecar, report CSV)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError

LABEL_COLUMN = "label"


@dataclass
class Dataset:
    """A labeled table, optionally with a fixed test split.

    ``discrete_columns`` is informational; no method treats those columns
    differently.  ``imbalance_guard`` asks the split planner to make sure
    every class appears early in each training permutation.
    """

    name: str
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    discrete_columns: tuple = ()
    imbalance_guard: bool = False
    X_test: np.ndarray | None = None
    y_test: np.ndarray | None = None
    feature_names: tuple | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.discrete_columns = tuple(int(c) for c in self.discrete_columns)
        if self.X.ndim != 2 or self.X.shape[1] < 1:
            raise ContractError(f"{self.name}: X must be 2-D with at least one column")
        if self.y.shape != (self.X.shape[0],):
            raise ContractError(f"{self.name}: one label per row required")
        if not 2 <= self.n_classes <= 10:
            raise ContractError(f"{self.name}: n_classes must lie in [2, 10]")
        if (self.X_test is None) != (self.y_test is None):
            raise ContractError(f"{self.name}: X_test and y_test go together")
        parts = [(self.X, self.y)]
        if self.X_test is not None:
            self.X_test = np.asarray(self.X_test, dtype=np.float64)
            self.y_test = np.asarray(self.y_test, dtype=np.int64)
            if self.X_test.ndim != 2 or self.X_test.shape[1] != self.X.shape[1]:
                raise ContractError(f"{self.name}: test features do not match train")
            if self.y_test.shape != (self.X_test.shape[0],):
                raise ContractError(f"{self.name}: one test label per row required")
            parts.append((self.X_test, self.y_test))
        for X, y in parts:
            if not np.isfinite(X).all():
                raise ContractError(f"{self.name}: non-finite feature values")
            if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                raise ContractError(f"{self.name}: labels outside [0, {self.n_classes})")
        if any(c < 0 or c >= self.X.shape[1] for c in self.discrete_columns):
            raise ContractError(f"{self.name}: discrete column index out of range")
        if self.feature_names is None:
            self.feature_names = tuple(f"x{i}" for i in range(self.X.shape[1]))
        self.feature_names = tuple(self.feature_names)
        if len(self.feature_names) != self.X.shape[1] or LABEL_COLUMN in self.feature_names:
            raise ContractError(f"{self.name}: bad feature names")

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def has_fixed_test(self) -> bool:
        return self.X_test is not None


def _format(v: float) -> str:
    # repr gives the shortest string that round-trips exactly
    return repr(float(v))


def _write_table(path: Path, names, X, y) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*names, LABEL_COLUMN])
        for row, lab in zip(X, y):
            w.writerow([*map(_format, row), str(int(lab))])


def _read_table(path: Path, n_features: int | None):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if not header or header[-1].strip() != LABEL_COLUMN:
            raise ParseError(f"{path}: last header column must be '{LABEL_COLUMN}'")
        names = [h.strip() for h in header[:-1]]
        if n_features is not None and len(names) != n_features:
            raise ParseError(f"{path}: {len(names)} feature columns, metadata says {n_features}")
        rows, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for col, cell in zip(names, row[:-1]):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"{path}:{line_no}: column {col!r}: not a number: {cell!r}") from None
                if not math.isfinite(v):
                    raise ParseError(f"{path}:{line_no}: column {col!r}: non-finite value {cell!r}")
                vals.append(v)
            try:
                lab = int(row[-1])
            except ValueError:
                raise ParseError(f"{path}:{line_no}: label is not an integer: {row[-1]!r}") from None
            rows.append(vals)
            labels.append(lab)
    X = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(names))
    return names, X, np.asarray(labels, dtype=np.int64)


def sidecar_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".json")


def save_csv_dataset(ds: Dataset, path) -> Path:
    """Write ``path`` (train rows), ``<stem>.json`` and, if present, ``<stem>_test.csv``."""
    path = Path(path)
    _write_table(path, ds.feature_names, ds.X, ds.y)
    test_name = None
    if ds.has_fixed_test:
        test_name = path.stem + "_test.csv"
        _write_table(path.with_name(test_name), ds.feature_names, ds.X_test, ds.y_test)
    meta = {
        "name": ds.name,
        "n_classes": ds.n_classes,
        "n_features": ds.n_features,
        "discrete_columns": list(ds.discrete_columns),
        "imbalance_guard": ds.imbalance_guard,
        "test_csv": test_name,
    }
    if ds.extra:
        meta["extra"] = ds.extra
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_csv_dataset(path, meta_path=None) -> Dataset:
    path = Path(path)
    meta_path = Path(meta_path) if meta_path is not None else sidecar_path(path)
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise ParseError(f"metadata sidecar {meta_path} not found") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{meta_path}: invalid JSON ({exc})") from None
    for key in ("name", "n_classes"):
        if key not in meta:
            raise ParseError(f"{meta_path}: missing field {key!r}")
    names, X, y = _read_table(path, meta.get("n_features"))
    X_test = y_test = None
    if meta.get("test_csv"):
        test_path = Path(meta["test_csv"])
        if not test_path.is_absolute():
            test_path = meta_path.parent / test_path
        test_names, X_test, y_test = _read_table(test_path, len(names))
        if test_names != names:
            raise ParseError(f"{test_path}: header differs from {path}")
    return Dataset(meta["name"], X, y, int(meta["n_classes"]), tuple(meta.get("discrete_columns", ())),
                   bool(meta.get("imbalance_guard", False)), X_test, y_test, tuple(names),
                   meta.get("extra", {}))


# ---------------------------------------------------------------------------
# benchmark report

REPORT_COLUMNS = (
    "dataset", "method", "split", "fraction", "status", "n_train", "n_test",
    "f1", "f1_macro", "accuracy",
    "tune_seconds", "train_seconds", "inference_seconds", "total_seconds",
    "seed", "params", "reason",
)
TIMING_COLUMNS = ("tune_seconds", "train_seconds", "inference_seconds", "total_seconds")
_INT_COLUMNS = ("split", "fraction", "n_train", "n_test", "seed")
_FLOAT_COLUMNS = ("f1", "f1_macro", "accuracy") + TIMING_COLUMNS


def save_report(records, path) -> Path:
    """One record per row in ``REPORT_COLUMNS`` order; missing metrics are empty cells."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in records:
            d = r.to_row() if hasattr(r, "to_row") else r
            cells = []
            for c in REPORT_COLUMNS:
                v = d.get(c)
                if v is None:
                    cells.append("")
                elif c in _FLOAT_COLUMNS:
                    cells.append(_format(v))
                else:
                    cells.append(str(v))
            w.writerow(cells)
    return path


def load_report(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ParseError(f"{path}: unexpected report header")
        for line_no, row in enumerate(reader, start=2):
            d = {}
            try:
                for c in REPORT_COLUMNS:
                    v = row[c]
                    if v == "":
                        d[c] = None
                    elif c in _INT_COLUMNS:
                        d[c] = int(v)
                    elif c in _FLOAT_COLUMNS:
                        d[c] = float(v)
                    else:
                        d[c] = v
            except ValueError as exc:
                raise ParseError(f"{path}:{line_no}: {exc}") from None
            out.append(d)
    return out


def save_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")
