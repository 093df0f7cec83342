"""Three-stage Density-Regression training, checkpoints, and the Gaussian/ensemble baselines.

Stage 1 fits extractor and head on the plain Gaussian NLL. Stage 2 freezes
the extractor and fits a density to the training features. Stage 3 freezes
extractor and density and refits only the head with the density-modulated
predictive. Prediction is one extractor pass plus one density query.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import numerics as nx
from .data import StandardizationStats, TabularDataset, destandardize_prediction, fit_standardization, standardize, standardize_x
from .density import AffineCoupling, FlowConfig, FlowModel, KdeModel, RadialLayer, fit_flow, fit_kde, median_l1_bandwidth
from .errors import ConfigError, DataError, NumericError
from .regressor import (
    FeatureExtractor,
    GaussianHead,
    PredictiveGaussian,
    clip_log_p,
    gaussian_from_head,
    log_std_and_mean,
    nll,
    training_loss,
)

# Sub-stream keys for make_rng(seed, key); one consumer per key.
STREAM_EXTRACTOR = 1
STREAM_HEAD = 2
STREAM_STAGE1_ORDER = 3
STREAM_STAGE3_ORDER = 4
STREAM_DENSITY = 5

CHECKPOINT_FORMAT = "densreg-checkpoint"
ENSEMBLE_FORMAT = "densreg-ensemble"


@dataclass
class TrainConfig:
    seed: int = 0
    stage1_epochs: int = 200
    density_epochs: int = 200
    stage3_epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    hidden: tuple[int, ...] = (100, 100)
    feature_dim: int | None = 8
    density: str = "flow"
    flow_kind: str = "coupling"
    flow_layers: int = 2
    flow_hidden: int = 16
    kde_bandwidth: float | None = None
    kde_bandwidth_scale: float = 1.0
    log_p_clip: tuple[float, float] = (-30.0, 30.0)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.log_p_clip = tuple(float(v) for v in self.log_p_clip)
        self.validate()

    def validate(self) -> None:
        counts = [self.stage1_epochs, self.density_epochs, self.stage3_epochs, self.batch_size, self.flow_hidden, *self.hidden]
        if any(int(c) < 1 for c in counts) or self.flow_layers < 0:
            raise ConfigError("epoch counts, batch size and layer widths must be positive")
        if self.feature_dim is not None and self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.density not in ("flow", "kde"):
            raise ConfigError(f"density must be 'flow' or 'kde', got {self.density!r}")
        if self.flow_kind not in ("coupling", "radial", "gaussian"):
            raise ConfigError(f"unknown flow kind {self.flow_kind!r}")
        if self.kde_bandwidth is not None and not self.kde_bandwidth > 0:
            raise ConfigError("kde_bandwidth must be positive")
        if not self.kde_bandwidth_scale > 0:
            raise ConfigError("kde_bandwidth_scale must be positive")
        lo, hi = self.log_p_clip
        if not lo < hi:
            raise ConfigError("log_p_clip must be an increasing pair")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["log_p_clip"] = list(self.log_p_clip)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training settings: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **changes})


@dataclass
class DensityRegressor:
    """Extractor, head, optional density and the training-set standardization.

    ``stage`` is 1 after the plain Gaussian fit, 2 once a density exists and
    3 after the head has been refit against it. ``head_plain`` keeps the
    stage-1 head so the un-modulated model stays available for comparison.
    The value handed to the head is ``clip(log p(z) - log_p_ref)`` where
    ``log_p_ref`` is the mean training log-density; a constant shift of
    ``log p`` is a rescaling of ``p`` that the head absorbs exactly.
    """

    config: TrainConfig
    stats: StandardizationStats
    extractor: FeatureExtractor
    head: GaussianHead
    stage: int = 1
    density: FlowModel | KdeModel | None = None
    log_p_ref: float = 0.0
    head_plain: GaussianHead | None = None
    traces: dict = field(default_factory=dict)

    def modulation(self, z) -> np.ndarray:
        lo, hi = self.config.log_p_clip
        return np.clip(self.density.log_prob(z) - self.log_p_ref, lo, hi)

    def predict_standardized(self, Xs, plain: bool = False) -> PredictiveGaussian:
        z = self.extractor(Xs)
        if plain or self.stage < 3:
            head = self.head_plain if (plain and self.head_plain is not None) else self.head
            s, m = head(z)
            return gaussian_from_head(s.data, m.data)
        log_p = self.modulation(z.data)
        s, m = self.head(z)
        return gaussian_from_head(s.data, m.data, log_p)

    def predict(self, X, plain: bool = False) -> PredictiveGaussian:
        """Forecast in raw target units for raw inputs."""
        return destandardize_prediction(self.predict_standardized(standardize_x(X, self.stats), plain), self.stats)

    def features(self, X) -> np.ndarray:
        return self.extractor.extract(standardize_x(X, self.stats))


# -- stage loops ---------------------------------------------------------------


def _check_loss(value: float, stage: str, epoch: int, batch: int) -> None:
    if not np.isfinite(value):
        raise NumericError(f"{stage}: non-finite loss at epoch {epoch}, batch {batch}")


def _full_nll(y, log_std, mean) -> float:
    var = np.exp(log_std.data.reshape(-1)) ** 2
    return float(np.mean(nll(y, PredictiveGaussian(mean.data.reshape(-1), np.maximum(var, 1e-300)))))


def stage1_train(train: TabularDataset, config: TrainConfig) -> tuple[FeatureExtractor, GaussianHead, list[float]]:
    """Fit extractor and head on the plain Gaussian NLL; ``train`` is standardized.

    The trace holds the full-data mean NLL before training and after each epoch.
    """
    extractor = FeatureExtractor(train.n_features, config.hidden, config.feature_dim, nx.make_rng(config.seed, STREAM_EXTRACTOR))
    head = GaussianHead(extractor.feature_dim, nx.make_rng(config.seed, STREAM_HEAD))
    opt = nx.Adam(extractor.params + head.params, lr=config.lr)
    order = nx.make_rng(config.seed, STREAM_STAGE1_ORDER)
    X, y = train.X, train.y

    def full():
        return _full_nll(y, *log_std_and_mean(*head(extractor(X))))

    trace = [full()]
    for epoch in range(config.stage1_epochs):
        perm = order.permutation(len(y))
        for b, start in enumerate(range(0, len(y), config.batch_size)):
            idx = perm[start:start + config.batch_size]
            opt.zero_grad()
            with nx.Tape() as tape:
                loss = training_loss(y[idx], *log_std_and_mean(*head(extractor(X[idx]))))
            _check_loss(loss.item(), "stage 1", epoch, b)
            tape.backward(loss)
            opt.step()
        trace.append(full())
        _check_loss(trace[-1], "stage 1", epoch, -1)
    extractor.calls = extractor.rows = 0
    return extractor, head, trace


def stage2_train_density(extractor: FeatureExtractor, train: TabularDataset, config: TrainConfig):
    """Fit the configured density on frozen training features."""
    z = extractor.extract(train.X)
    extractor.calls = extractor.rows = 0
    if config.density == "kde":
        h = config.kde_bandwidth if config.kde_bandwidth is not None else median_l1_bandwidth(z)
        return fit_kde(z, h * config.kde_bandwidth_scale)
    cfg = FlowConfig(
        kind=config.flow_kind,
        n_layers=config.flow_layers,
        hidden=config.flow_hidden,
        epochs=config.density_epochs,
        batch_size=config.batch_size,
        lr=config.lr,
        seed=int(nx.make_rng(config.seed, STREAM_DENSITY).integers(2**63 - 1)),
    )
    return fit_flow(z, cfg)


def stage3_retrain_head(
    extractor: FeatureExtractor,
    density,
    head: GaussianHead,
    train: TabularDataset,
    config: TrainConfig,
    log_p_ref: float,
) -> tuple[GaussianHead, list[float]]:
    """Refit a copy of ``head`` on the density-modulated NLL; extractor and density stay fixed."""
    head = copy.deepcopy(head)
    z = extractor.extract(train.X)
    extractor.calls = extractor.rows = 0
    lo, hi = config.log_p_clip
    log_p = np.clip(density.log_prob(z) - log_p_ref, lo, hi)
    density.queries = density.rows = 0
    y = train.y
    opt = nx.Adam(head.params, lr=config.lr)
    order = nx.make_rng(config.seed, STREAM_STAGE3_ORDER)

    def full():
        return _full_nll(y, *log_std_and_mean(*head(z), log_p.reshape(-1, 1)))

    trace = [full()]
    for epoch in range(config.stage3_epochs):
        perm = order.permutation(len(y))
        for b, start in enumerate(range(0, len(y), config.batch_size)):
            idx = perm[start:start + config.batch_size]
            opt.zero_grad()
            with nx.Tape() as tape:
                loss = training_loss(y[idx], *log_std_and_mean(*head(z[idx]), log_p[idx].reshape(-1, 1)))
            _check_loss(loss.item(), "stage 3", epoch, b)
            tape.backward(loss)
            opt.step()
        trace.append(full())
        _check_loss(trace[-1], "stage 3", epoch, -1)
    return head, trace


def train_gaussian(train_raw: TabularDataset, config: TrainConfig) -> DensityRegressor:
    """The Deterministic Gaussian baseline: stage 1 only."""
    stats = fit_standardization(train_raw)
    extractor, head, trace = stage1_train(standardize(train_raw, stats), config)
    return DensityRegressor(config, stats, extractor, head, stage=1, head_plain=head, traces={"stage1": trace})


def run_pipeline(train_raw: TabularDataset, config: TrainConfig, resume: DensityRegressor | None = None) -> DensityRegressor:
    """Run all three stages on raw training data, optionally resuming a stage-1 model.

    Every stage draws from its own random stream, so a resumed run is
    bit-identical to an uninterrupted one with the same seed.
    """
    if resume is not None:
        if resume.config.to_dict() != config.to_dict():
            raise ConfigError("resume checkpoint was trained with a different configuration")
        model = copy.deepcopy(resume)
        if model.stage != 1:
            raise ConfigError(f"can only resume from a stage-1 checkpoint, got stage {model.stage}")
    else:
        model = train_gaussian(train_raw, config)
    train = standardize(train_raw, model.stats)
    model.head_plain = model.head
    model.density = stage2_train_density(model.extractor, train, config)
    model.log_p_ref = float(np.mean(model.density.log_prob(model.extractor.extract(train.X))))
    model.extractor.calls = model.extractor.rows = 0
    model.stage = 2
    if hasattr(model.density, "loss_trace"):
        model.traces["density"] = list(model.density.loss_trace)
    model.head, model.traces["stage3"] = stage3_retrain_head(model.extractor, model.density, model.head_plain, train, config, model.log_p_ref)
    model.density.queries = model.density.rows = 0
    model.stage = 3
    return model


# -- ensembles -----------------------------------------------------------------


def aggregate_gaussians(preds: Sequence[PredictiveGaussian]) -> PredictiveGaussian:
    """Mixture moments: mean of means; mean of (spread**2 + member variance)."""
    if len(preds) < 1:
        raise ConfigError("need at least one member prediction")
    means = np.stack([p.mean for p in preds])
    vars_ = np.stack([p.var for p in preds])
    mu = means.mean(axis=0)
    return PredictiveGaussian(mu, np.mean((mu - means) ** 2 + vars_, axis=0))


@dataclass
class EnsembleModel:
    members: list[DensityRegressor]

    @property
    def size(self) -> int:
        return len(self.members)

    def predict(self, X) -> PredictiveGaussian:
        return aggregate_gaussians([m.predict(X) for m in self.members])


def _train_member(args):
    train_raw, config = args
    return train_gaussian(train_raw, config)


def worker_count(requested: int | None = None) -> int:
    cap = int(os.environ.get("DENSREG_THREADS", "0") or 0)
    n = requested or 1
    return max(1, min(n, cap) if cap > 0 else n)


def member_seeds(seed: int, M: int) -> list[int]:
    return [int(v) for v in nx.make_rng(seed, 300).integers(0, 2**31 - 1, size=M)]


def train_ensemble(train_raw: TabularDataset, config: TrainConfig, M: int = 5, workers: int | None = None) -> EnsembleModel:
    """``M`` Gaussian models differing only in seed; members share nothing mutable."""
    if M < 1:
        raise ConfigError(f"ensemble size must be at least 1, got {M}")
    jobs = [(train_raw, config.replace(seed=s)) for s in member_seeds(config.seed, M)]
    n = worker_count(workers)
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            members = list(pool.map(_train_member, jobs))
    else:
        members = [_train_member(job) for job in jobs]
    return EnsembleModel(members)


def ensemble_predict(model: EnsembleModel, X) -> PredictiveGaussian:
    return model.predict(X)


# -- efficiency ----------------------------------------------------------------


def _count(params) -> int:
    return int(sum(p.data.size for p in params))


def count_parameters(model) -> int:
    """Scalars needed at inference: extractor + head (+ density) per member."""
    if isinstance(model, EnsembleModel):
        return sum(count_parameters(m) for m in model.members)
    total = _count(model.extractor.params) + _count(model.head.params)
    if model.stage >= 3 and model.density is not None:
        total += density_parameter_count(model.density)
    return total


def density_parameter_count(density) -> int:
    if isinstance(density, KdeModel):
        return density.n_stored()
    return _count(density.params)


def time_inference(model, X, repeats: int = 30, warmup: int = 3) -> float:
    """Median wall-clock seconds of ``model.predict(X)``."""
    for _ in range(warmup):
        model.predict(X)
    times = []
    for _ in range(max(repeats, 1)):
        t0 = time.perf_counter()
        model.predict(X)
        times.append(time.perf_counter() - t0)
    return float(statistics.median(times))


# -- checkpoints ---------------------------------------------------------------


def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "values": a.reshape(-1).tolist()}


def _unarr(d: dict) -> np.ndarray:
    return np.asarray(d["values"], dtype=np.float64).reshape(d["shape"])


def _params_state(params) -> list[dict]:
    return [_arr(p.data) for p in params]


def _load_params(params, state: list[dict]) -> None:
    if len(params) != len(state):
        raise ConfigError("checkpoint parameter list does not match the architecture")
    for p, s in zip(params, state):
        a = _unarr(s)
        if a.shape != p.data.shape:
            raise ConfigError(f"checkpoint array shape {a.shape} does not match {p.data.shape}")
        p.data = a


def _density_state(density) -> dict | None:
    if density is None:
        return None
    if isinstance(density, KdeModel):
        return {"kind": "kde", "bandwidth": density.bandwidth, "support": _arr(density.support)}
    layers = []
    for layer in density.layers:
        spec = {"kind": layer.kind, "params": _params_state(layer.params)}
        if isinstance(layer, AffineCoupling):
            spec.update(flip=layer.flip, hidden=int(layer.w1.shape[1]))
        layers.append(spec)
    return {"kind": "flow", "dim": density.dim, "layers": layers, "loss_trace": list(density.loss_trace)}


def _density_from_state(state: dict | None):
    if state is None:
        return None
    if state["kind"] == "kde":
        return KdeModel(_unarr(state["support"]), state["bandwidth"])
    layers = []
    for spec in state["layers"]:
        if spec["kind"] == "coupling":
            layer = AffineCoupling(state["dim"], spec["hidden"], flip=spec["flip"])
        elif spec["kind"] == "radial":
            layer = RadialLayer(state["dim"])
        else:
            raise ConfigError(f"unknown flow layer kind {spec['kind']!r}")
        _load_params(layer.params, spec["params"])
        layers.append(layer)
    return FlowModel(state["dim"], layers, loss_trace=list(state.get("loss_trace", [])))


def model_state(model: DensityRegressor) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": __version__,
        "stage": model.stage,
        "config": model.config.to_dict(),
        "stats": model.stats.to_dict(),
        "input_dim": model.extractor.input_dim,
        "extractor": _params_state(model.extractor.params),
        "head": _params_state(model.head.params),
        "head_plain": _params_state(model.head_plain.params) if model.head_plain is not None else None,
        "density": _density_state(model.density),
        "log_p_ref": model.log_p_ref,
        "traces": model.traces,
    }


def model_from_state(state: dict) -> DensityRegressor:
    if state.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError("not a density-regression checkpoint")
    config = TrainConfig.from_dict(state["config"])
    extractor = FeatureExtractor(state["input_dim"], config.hidden, config.feature_dim)
    _load_params(extractor.params, state["extractor"])
    head = GaussianHead(extractor.feature_dim)
    _load_params(head.params, state["head"])
    head_plain = None
    if state.get("head_plain") is not None:
        head_plain = GaussianHead(extractor.feature_dim)
        _load_params(head_plain.params, state["head_plain"])
    return DensityRegressor(
        config,
        StandardizationStats.from_dict(state["stats"]),
        extractor,
        head,
        stage=int(state["stage"]),
        density=_density_from_state(state["density"]),
        log_p_ref=float(state["log_p_ref"]),
        head_plain=head_plain,
        traces=state.get("traces", {}),
    )


def save_checkpoint(model, path, extra: dict | None = None) -> None:
    """Write a JSON checkpoint; floats use shortest round-trip repr, so reload is exact."""
    if isinstance(model, EnsembleModel):
        state = {"format": ENSEMBLE_FORMAT, "version": __version__, "members": [model_state(m) for m in model.members]}
    else:
        state = model_state(model)
    if extra:
        state["provenance"] = extra
    Path(path).write_text(json.dumps(state, sort_keys=True) + "\n")


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such checkpoint: {path}")
    try:
        state = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: unreadable checkpoint ({exc})") from None
    if state.get("format") == ENSEMBLE_FORMAT:
        return EnsembleModel([model_from_state(m) for m in state["members"]])
    return model_from_state(state)


def param_digest(params) -> str:
    """SHA-256 over the raw bytes of a parameter list, for freeze checks."""
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
