"""Datasets: the cubic toy generator, delimited-text loading, standardization and shift splits."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DataError
from .regressor import PredictiveGaussian

TOY_TRAIN_RANGE = (-4.0, 4.0)
TOY_OOD_RANGE = (4.0, 7.0)
TOY_NOISE_STD = 3.0


@dataclass(frozen=True)
class TabularDataset:
    X: np.ndarray
    y: np.ndarray
    columns: tuple[str, ...] = ()
    provenance: str = ""

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise DataError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        if X.shape[0] < 1 or X.shape[1] < 1:
            raise DataError(f"dataset must have n >= 1 and d >= 1, got shape {X.shape}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError("dataset contains non-finite values")
        cols = tuple(self.columns) or tuple(f"x{i}" for i in range(X.shape[1]))
        if len(cols) != X.shape[1]:
            raise DataError(f"{len(cols)} column names for {X.shape[1]} feature columns")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "columns", cols)

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, idx, provenance: str | None = None) -> "TabularDataset":
        return TabularDataset(self.X[idx], self.y[idx], self.columns, provenance or self.provenance)


@dataclass(frozen=True)
class ShiftSplit:
    train: TabularDataset
    iid_test: TabularDataset
    ood_test: TabularDataset
    train_index: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    iid_index: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))


# -- cubic toy ---------------------------------------------------------------


def cubic_target(x, noise_std: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = x**3
    if noise_std > 0:
        if rng is None:
            raise ValueError("a generator is required for noisy targets")
        y = y + noise_std * rng.standard_normal(x.shape)
    return y


def generate_cubic_toy(n_train: int = 1000, n_test: int = 500, seed: int = 0, noise_std: float = TOY_NOISE_STD) -> ShiftSplit:
    """``y = x^3 + eps``; train/IID x ~ U[-4, 4], OOD x ~ U on [-7, -4] and [4, 7]."""
    if n_train < 1 or n_test < 1:
        raise ConfigError("toy sample counts must be positive")
    rng = nx.make_rng(seed, 100)
    lo, hi = TOY_TRAIN_RANGE

    def make(x, tag):
        return TabularDataset(x.reshape(-1, 1), cubic_target(x, noise_std, rng), ("x",), f"cubic-toy:{tag}")

    x_train = rng.uniform(lo, hi, n_train)
    x_iid = rng.uniform(lo, hi, n_test)
    side = np.where(rng.random(n_test) < 0.5, -1.0, 1.0)
    x_ood = side * rng.uniform(*TOY_OOD_RANGE, n_test)
    return ShiftSplit(make(x_train, "train"), make(x_iid, "iid"), make(x_ood, "ood"))


# -- delimited text ----------------------------------------------------------


def _sniff_delimiter(header: str) -> str:
    return ";" if header.count(";") > header.count(",") else ","


def load_csv(path, target_column: str, delimiter: str | None = None) -> TabularDataset:
    """Read a headed delimited file; every cell must parse as a float.

    ``delimiter=None`` picks ``;`` or ``,`` from the header line. Errors name
    the 1-based file line and the column of the offending cell.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such data file: {path}")
    with path.open(newline="") as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    delim = delimiter or _sniff_delimiter(lines[0])
    reader = csv.reader(lines, delimiter=delim)
    header = [h.strip() for h in next(reader)]
    if target_column not in header:
        raise DataError(f"{path}: target column {target_column!r} not in header {header}")
    t = header.index(target_column)
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: line {lineno} has {len(row)} cells, expected {len(header)}")
        values = []
        for col, cell in zip(header, row):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: line {lineno}, column {col!r}: cannot parse {cell!r} as a number") from None
            if not np.isfinite(v):
                raise DataError(f"{path}: line {lineno}, column {col!r}: non-finite value {cell!r}")
            values.append(v)
        rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.array(rows, dtype=np.float64)
    feature_cols = [c for i, c in enumerate(header) if i != t]
    X = np.delete(arr, t, axis=1)
    return TabularDataset(X, arr[:, t], tuple(feature_cols), str(path))


def write_csv(ds: TabularDataset, path, target_column: str = "y", delimiter: str = ",") -> None:
    """Write with round-trip-exact float formatting (``repr``)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow([*ds.columns, target_column])
        for xi, yi in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])


# -- standardization ---------------------------------------------------------


@dataclass(frozen=True)
class StandardizationStats:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    constant_columns: tuple[int, ...] = ()

    @classmethod
    def fit(cls, train: TabularDataset) -> "StandardizationStats":
        x_std = train.X.std(axis=0)
        const = tuple(int(i) for i in np.flatnonzero(x_std <= 0))
        if const:
            warnings.warn(f"constant feature columns {const}; using std = 1", RuntimeWarning, stacklevel=2)
        x_std = np.where(x_std > 0, x_std, 1.0)
        y_std = float(train.y.std())
        if not y_std > 0:
            warnings.warn("constant target; using std = 1", RuntimeWarning, stacklevel=2)
            y_std = 1.0
        return cls(train.X.mean(axis=0), x_std, float(train.y.mean()), y_std, const)

    def to_dict(self) -> dict:
        return {
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "y_mean": self.y_mean,
            "y_std": self.y_std,
            "constant_columns": list(self.constant_columns),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationStats":
        return cls(
            np.asarray(d["x_mean"], dtype=np.float64),
            np.asarray(d["x_std"], dtype=np.float64),
            float(d["y_mean"]),
            float(d["y_std"]),
            tuple(d.get("constant_columns", ())),
        )


def fit_standardization(train: TabularDataset) -> StandardizationStats:
    return StandardizationStats.fit(train)


def standardize_x(X, stats: StandardizationStats) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.shape[1] != stats.x_mean.shape[0]:
        raise DataError(f"expected {stats.x_mean.shape[0]} feature columns, got {X.shape[1]}")
    return (X - stats.x_mean) / stats.x_std


def standardize(ds: TabularDataset, stats: StandardizationStats) -> TabularDataset:
    return TabularDataset(standardize_x(ds.X, stats), (ds.y - stats.y_mean) / stats.y_std, ds.columns, ds.provenance)


def destandardize_targets(y, stats: StandardizationStats) -> np.ndarray:
    return np.asarray(y, dtype=np.float64) * stats.y_std + stats.y_mean


def destandardize_prediction(pred: PredictiveGaussian, stats: StandardizationStats) -> PredictiveGaussian:
    return PredictiveGaussian(pred.mean * stats.y_std + stats.y_mean, pred.var * stats.y_std**2)


# -- shift splits ------------------------------------------------------------


def make_shift_split(source_a: TabularDataset, source_b: TabularDataset, iid_fraction: float = 0.8, seed: int = 0) -> ShiftSplit:
    """Shuffle ``source_a`` into train / IID test; all of ``source_b`` is the OOD test.

    ``iid_fraction`` is the share of ``source_a`` kept for training; both
    resulting parts must be non-empty.
    """
    if tuple(source_a.columns) != tuple(source_b.columns):
        raise DataError(f"column mismatch between sources: {source_a.columns} vs {source_b.columns}")
    n = len(source_a)
    n_train = int(round(iid_fraction * n))
    if not 0 < n_train < n:
        raise ConfigError(f"iid_fraction={iid_fraction} leaves an empty train or IID test split (n={n})")
    perm = nx.make_rng(seed, 200).permutation(n)
    tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    return ShiftSplit(
        source_a.subset(tr, f"{source_a.provenance}:train"),
        source_a.subset(te, f"{source_a.provenance}:iid"),
        source_b,
        tr,
        te,
    )
