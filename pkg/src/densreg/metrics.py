"""Forecast evaluation: calibration, sharpness, NLL, RMSE, reliability curves, feature distance."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .regressor import PredictiveGaussian, nll

DEFAULT_THRESHOLDS = tuple(j / 21 for j in range(1, 21))


@dataclass(frozen=True)
class ForecastSet:
    forecasts: PredictiveGaussian
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if y.shape[0] != len(self.forecasts):
            raise DataError(f"{len(self.forecasts)} forecasts but {y.shape[0]} realizations")
        if y.shape[0] < 1:
            raise DataError("forecast set is empty")
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.y.shape[0]

    def pit(self) -> np.ndarray:
        return self.forecasts.cdf(self.y)


def _check_thresholds(thresholds) -> np.ndarray:
    p = np.asarray(thresholds, dtype=np.float64).reshape(-1)
    if p.size == 0 or np.any(p < 0) or np.any(p > 1) or np.any(np.diff(p) <= 0):
        raise ValueError("thresholds must be strictly increasing values in [0, 1]")
    return p


def reliability_from_pit(pit, thresholds=DEFAULT_THRESHOLDS) -> np.ndarray:
    """Fraction of PIT values ``<= p_j`` for each threshold."""
    pit = np.asarray(pit, dtype=np.float64).reshape(-1)
    if pit.size == 0:
        raise DataError("no PIT values")
    p = _check_thresholds(thresholds)
    return np.searchsorted(np.sort(pit), p, side="right") / pit.size


def calibration_from_pit(pit, thresholds=DEFAULT_THRESHOLDS) -> float:
    p = _check_thresholds(thresholds)
    return float(np.sum((p - reliability_from_pit(pit, p)) ** 2))


def calibration_score(fs: ForecastSet, thresholds=DEFAULT_THRESHOLDS) -> float:
    """``sum_j (p_j - #{i : F_i(y_i) <= p_j} / n)**2``."""
    return calibration_from_pit(fs.pit(), thresholds)


def reliability_curve(fs: ForecastSet, thresholds=DEFAULT_THRESHOLDS) -> list[tuple[float, float]]:
    p = _check_thresholds(thresholds)
    return list(zip(p.tolist(), reliability_from_pit(fs.pit(), p).tolist()))


def sharpness(fs: ForecastSet) -> float:
    """Root of the mean forecast variance."""
    return float(np.sqrt(np.mean(fs.forecasts.var)))


def nll_metric(fs: ForecastSet) -> float:
    return float(np.mean(nll(fs.y, fs.forecasts)))


def rmse(fs: ForecastSet) -> float:
    return float(np.sqrt(np.mean((fs.y - fs.forecasts.mean) ** 2)))


def feature_distance(z, train_features, metric: str = "l2") -> np.ndarray:
    """Mean distance from each query feature to the reference features."""
    ref = np.asarray(train_features, dtype=np.float64)
    if ref.ndim == 1:
        ref = ref.reshape(-1, 1)
    if ref.shape[0] == 0:
        raise DataError("reference feature set is empty")
    q = np.asarray(z, dtype=np.float64)
    single = q.ndim == 1 and ref.shape[1] == q.shape[0]
    q = q.reshape(-1, ref.shape[1])
    diff = q[:, None, :] - ref[None, :, :]
    if metric == "l2":
        d = np.sqrt((diff**2).sum(axis=2))
    elif metric == "l1":
        d = np.abs(diff).sum(axis=2)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    out = d.mean(axis=1)
    return out[0] if single else out


@dataclass
class MetricsReport:
    nll: float
    rmse: float
    cal: float
    sharp: float
    n: int
    split: str
    reliability: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reliability"] = [list(pair) for pair in self.reliability]
        return d

    def write(self, path, provenance: dict | None = None) -> None:
        payload = {"kind": "metrics", **self.to_dict()}
        if provenance:
            payload["provenance"] = provenance
        Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "MetricsReport":
        d = json.loads(Path(path).read_text())
        return cls(d["nll"], d["rmse"], d["cal"], d["sharp"], d["n"], d["split"], [tuple(p) for p in d["reliability"]])


def evaluate(fs: ForecastSet, split: str, thresholds=DEFAULT_THRESHOLDS) -> MetricsReport:
    if split not in ("iid", "ood"):
        raise ValueError(f"split label must be 'iid' or 'ood', got {split!r}")
    return MetricsReport(
        nll=nll_metric(fs),
        rmse=rmse(fs),
        cal=calibration_score(fs, thresholds),
        sharp=sharpness(fs),
        n=len(fs),
        split=split,
        reliability=reliability_curve(fs, thresholds),
    )


SUMMARY_COLUMNS = ("method", "seed", "split", "nll", "rmse", "cal", "sharp")


def write_summary(rows: Iterable[dict], path, extra_columns: Sequence[str] = ()) -> None:
    """Comma-separated table: method, seed, split, nll, rmse, cal, sharp (+ extras)."""
    cols = list(SUMMARY_COLUMNS) + list(extra_columns)
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
