"""Feature extractor, Gaussian head and the density-modulated predictive.

The head emits two unconstrained scalars per input, ``s`` and ``m``. Without
a density they give

    log_std = -(log 2 + s) / 2,   var = exp(log_std)**2,   mean = var * (-2 m)

and with a feature log-density ``log_p`` the same map becomes

    log_std = -(log 2 + log_p + s) / 2,   mean = var * (-2 exp(log_p) m).

The density cancels out of the mean (``mean == -m / exp(s)``) while the
variance scales as ``1 / p``. This is the reparametrized form of the
exponential-family head with sufficient statistic
``[z y^2, y^2, 2 z y, 2 y, z, 1]``; that statistic and its log-normalizer are
never materialized, only the Gaussian they collapse to.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from . import numerics as nx
from .numerics import Tensor

LOG2 = math.log(2.0)
LOG_P_CLIP = (-30.0, 30.0)
VAR_FLOOR = 1e-12


class Dense:
    """Affine layer ``x @ W + b`` with Glorot-uniform weights and zero bias."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "dense"):
        limit = math.sqrt(6.0 / (n_in + n_out))
        self.weight = Tensor(rng.uniform(-limit, limit, size=(n_in, n_out)), requires_grad=True, name=f"{name}.W")
        self.bias = Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.b")

    @property
    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x) -> Tensor:
        return nx.matmul(x, self.weight) + self.bias


class FeatureExtractor:
    """MLP ``x -> z``: ReLU hidden layers followed by an optional linear projection.

    With ``feature_dim=None`` the last ReLU layer is the feature vector.
    ``calls`` and ``rows`` count forward passes for instrumentation.
    """

    def __init__(
        self,
        input_dim: int,
        hidden: Sequence[int] = (100, 100),
        feature_dim: int | None = 8,
        rng: np.random.Generator | None = None,
    ):
        if input_dim < 1 or any(h < 1 for h in hidden) or (feature_dim is not None and feature_dim < 1):
            raise ValueError("layer sizes must be positive")
        rng = rng if rng is not None else nx.make_rng(0)
        self.input_dim = input_dim
        self.hidden = tuple(hidden)
        widths = [input_dim, *hidden]
        self.layers = [Dense(a, b, rng, name=f"f{i}") for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        self.projection = Dense(widths[-1], feature_dim, rng, name="proj") if feature_dim is not None else None
        self.feature_dim = feature_dim if feature_dim is not None else widths[-1]
        self.calls = 0
        self.rows = 0

    @property
    def params(self) -> list[Tensor]:
        out = [p for layer in self.layers for p in layer.params]
        if self.projection is not None:
            out += self.projection.params
        return out

    def __call__(self, x) -> Tensor:
        x = nx.as_tensor(x)
        if x.data.ndim == 1:
            x = Tensor(x.data.reshape(1, -1))
        if x.shape[1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} input features, got {x.shape[1]}")
        self.calls += 1
        self.rows += x.shape[0]
        h = x
        for layer in self.layers:
            h = nx.relu(layer(h))
        return self.projection(h) if self.projection is not None else h

    def extract(self, x) -> np.ndarray:
        return self(x).data


def extract_features(x, extractor: FeatureExtractor) -> np.ndarray:
    return extractor.extract(x)


class GaussianHead:
    """Single affine map ``z -> (s, m)``; column 0 is ``s``, column 1 is ``m``."""

    def __init__(self, feature_dim: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else nx.make_rng(0)
        self.dense = Dense(feature_dim, 2, rng, name="head")
        self.feature_dim = feature_dim

    @property
    def params(self) -> list[Tensor]:
        return self.dense.params

    def __call__(self, z) -> tuple[Tensor, Tensor]:
        z = nx.as_tensor(z)
        if z.data.ndim == 1:
            z = Tensor(z.data.reshape(1, -1))
        s, m = nx.split(self.dense(z), [1, 1])
        return s, m


def clip_log_p(log_p):
    lo, hi = LOG_P_CLIP
    return np.clip(np.asarray(log_p, dtype=np.float64), lo, hi)


def log_std_and_mean(s: Tensor, m: Tensor, log_p=None) -> tuple[Tensor, Tensor]:
    """Differentiable ``(log_std, mean)`` of the head, optionally density-modulated.

    ``log_p`` is treated as a constant (the density is frozen when the head
    trains) and is used as given; clip it before calling.
    """
    if log_p is None:
        log_std = (s + LOG2) * -0.5
        var = nx.square(nx.exp(log_std))
        return log_std, var * (m * -2.0)
    lp = Tensor(np.asarray(log_p, dtype=np.float64).reshape(-1, 1))
    log_std = (s + lp + LOG2) * -0.5
    var = nx.square(nx.exp(log_std))
    return log_std, var * (nx.exp(lp) * m * -2.0)


def training_loss(y, log_std: Tensor, mean: Tensor) -> Tensor:
    """Batch mean of ``2 log_std + ((y - mean) / std)**2``.

    Equals twice the Gaussian NLL minus ``log(2 pi)``, so it has the same
    minimizers and gradients up to a factor of 2.
    """
    y = Tensor(np.asarray(y, dtype=np.float64).reshape(-1, 1))
    resid = (y - mean) / nx.exp(log_std)
    return nx.mean(log_std * 2.0 + nx.square(resid))


@dataclass(frozen=True)
class PredictiveGaussian:
    """Per-input Gaussian forecasts; ``mean`` and ``var`` are equal-length 1-D arrays."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64)).reshape(-1)
        var = np.atleast_1d(np.asarray(self.var, dtype=np.float64)).reshape(-1)
        if mean.shape != var.shape:
            raise ValueError(f"mean and var lengths differ: {mean.shape} vs {var.shape}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
            raise ValueError("predictive mean/variance must be finite")
        if np.any(var <= 0):
            raise ValueError("predictive variance must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    def __len__(self) -> int:
        return self.mean.shape[0]

    def __getitem__(self, idx) -> "PredictiveGaussian":
        return PredictiveGaussian(np.atleast_1d(self.mean[idx]), np.atleast_1d(self.var[idx]))

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)

    def cdf(self, y) -> np.ndarray:
        return cdf(self, y)

    def quantile(self, p) -> np.ndarray:
        return quantile(self, p)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal(self.mean.shape)


def gaussian_from_head(s, m, log_p=None) -> PredictiveGaussian:
    """Evaluate the head formulas on plain arrays; ``log_p`` is clipped, ``var`` floored."""
    s = np.asarray(s, dtype=np.float64).reshape(-1, 1)
    m = np.asarray(m, dtype=np.float64).reshape(-1, 1)
    lp = None if log_p is None else np.broadcast_to(clip_log_p(log_p).reshape(-1, 1), s.shape)
    log_std, mean = log_std_and_mean(Tensor(s), Tensor(m), lp)
    var = np.exp(log_std.data) ** 2
    return PredictiveGaussian(mean.data.reshape(-1), np.maximum(var, VAR_FLOOR).reshape(-1))


def predictive_plain(z, head: GaussianHead) -> PredictiveGaussian:
    s, m = head(z)
    return gaussian_from_head(s.data, m.data)


def predictive_density(z, head: GaussianHead, log_p) -> PredictiveGaussian:
    s, m = head(z)
    return gaussian_from_head(s.data, m.data, log_p)


def closed_form_moments(s, m, log_p) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance in the un-reparametrized form, with ``b = exp(s)``.

    ``mean = -m / b`` and ``var = 1 / (2 p b)``; only defined because
    ``exp(s) > 0``, which is the point of the reparametrization.
    """
    b = np.exp(np.asarray(s, dtype=np.float64))
    p = np.exp(np.asarray(log_p, dtype=np.float64))
    return -np.asarray(m, dtype=np.float64) / b, 1.0 / (2.0 * p * b)


def _check_var(var) -> np.ndarray:
    var = np.asarray(var, dtype=np.float64)
    if np.any(var <= 0):
        raise ValueError("variance must be positive")
    return var


def nll(y, pred: PredictiveGaussian) -> np.ndarray:
    """Per-point Gaussian NLL ``log(2 pi var)/2 + (y - mean)**2 / (2 var)``."""
    var = _check_var(pred.var)
    return 0.5 * np.log(2.0 * np.pi * var) + (np.asarray(y, dtype=np.float64) - pred.mean) ** 2 / (2.0 * var)


def training_nll(y, pred: PredictiveGaussian) -> np.ndarray:
    """Per-point ``2 log_std + ((y - mean)/std)**2`` == ``2 * nll - log(2 pi)``."""
    var = _check_var(pred.var)
    return np.log(var) + (np.asarray(y, dtype=np.float64) - pred.mean) ** 2 / var


def entropy(pred: PredictiveGaussian) -> np.ndarray:
    var = _check_var(pred.var)
    return 0.5 * np.log(2.0 * np.pi * var) + 0.5


def cdf(pred: PredictiveGaussian, y) -> np.ndarray:
    return special.ndtr((np.asarray(y, dtype=np.float64) - pred.mean) / pred.std)


def quantile(pred: PredictiveGaussian, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("quantile level must lie strictly inside (0, 1)")
    return pred.mean + pred.std * special.ndtri(p)
