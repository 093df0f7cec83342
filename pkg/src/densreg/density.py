"""Exact feature-space densities: normalizing flows and an L1 exponential KDE."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import logsumexp

from . import numerics as nx
from .errors import DataError, NumericError
from .numerics import Tensor

LOG_2PI = math.log(2.0 * math.pi)
SCALE_BOUND = 3.0


class AffineCoupling:
    """Affine coupling layer over a contiguous half split of the features.

    One half (the conditioning half) passes through unchanged and feeds a
    one-hidden-layer tanh MLP that emits a log-scale and a shift for every
    dimension of the other half. Log-scales are squashed to
    ``[-SCALE_BOUND, SCALE_BOUND]``. The output layer starts at zero, so a
    fresh layer is the identity. ``flip`` swaps which half is conditioned on.
    """

    kind = "coupling"

    def __init__(self, dim: int, hidden: int = 16, flip: bool = False, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else nx.make_rng(0)
        self.dim = dim
        self.flip = flip and dim > 1
        first = dim // 2
        self.sizes = (first, dim - first)
        n_cond, n_trans = (self.sizes[1], self.sizes[0]) if self.flip else self.sizes
        self.n_cond, self.n_trans = n_cond, n_trans
        limit = math.sqrt(6.0 / (max(n_cond, 1) + hidden))
        self.w1 = Tensor(rng.uniform(-limit, limit, size=(n_cond, hidden)), requires_grad=True, name="c.W1")
        self.b1 = Tensor(rng.uniform(-limit, limit, size=hidden), requires_grad=True, name="c.b1")
        self.w2 = Tensor(np.zeros((hidden, 2 * n_trans)), requires_grad=True, name="c.W2")
        self.b2 = Tensor(np.zeros(2 * n_trans), requires_grad=True, name="c.b2")

    @property
    def mask(self) -> np.ndarray:
        """True on the dimensions that pass through unchanged."""
        m = np.zeros(self.dim, dtype=bool)
        if self.flip:
            m[self.sizes[0]:] = True
        else:
            m[: self.sizes[0]] = True
        return m

    @property
    def params(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def _halves(self, z: Tensor) -> tuple[Tensor, Tensor]:
        a, b = nx.split(z, list(self.sizes))
        return (b, a) if self.flip else (a, b)

    def _join(self, cond: Tensor, trans: Tensor) -> Tensor:
        return nx.concat([trans, cond] if self.flip else [cond, trans])

    def _scale_shift(self, cond: Tensor) -> tuple[Tensor, Tensor]:
        h = nx.tanh(nx.matmul(cond, self.w1) + self.b1)
        raw, shift = nx.split(nx.matmul(h, self.w2) + self.b2, [self.n_trans, self.n_trans])
        return nx.tanh(raw) * SCALE_BOUND, shift

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        cond, trans = self._halves(z)
        log_scale, shift = self._scale_shift(cond)
        out = trans * nx.exp(log_scale) + shift
        return self._join(cond, out), nx.sum_(log_scale, axis=1)

    def inverse(self, t: Tensor) -> Tensor:
        cond, trans = self._halves(t)
        log_scale, shift = self._scale_shift(cond)
        return self._join(cond, (trans - shift) * nx.exp(-log_scale))

    def project(self) -> None:
        pass


class RadialLayer:
    """Radial flow ``z + beta * (z - z0) / (alpha + |z - z0|)``.

    Invertible while ``alpha > 0`` and ``beta >= -alpha``; :meth:`project`
    restores both after an optimizer step.
    """

    kind = "radial"
    MIN_ALPHA = 1e-6
    MARGIN = 1e-6

    def __init__(self, dim: int, rng: np.random.Generator | None = None, center=None):
        rng = rng if rng is not None else nx.make_rng(0)
        self.dim = dim
        z0 = rng.standard_normal(dim) if center is None else np.asarray(center, dtype=np.float64)
        self.center = Tensor(z0, requires_grad=True, name="r.z0")
        self.alpha = Tensor([1.0], requires_grad=True, name="r.alpha")
        self.beta = Tensor([0.0], requires_grad=True, name="r.beta")

    @property
    def params(self) -> list[Tensor]:
        return [self.center, self.alpha, self.beta]

    def project(self) -> None:
        a = max(float(self.alpha.data[0]), self.MIN_ALPHA)
        b = max(float(self.beta.data[0]), -a + self.MARGIN)
        self.alpha.data = np.array([a])
        self.beta.data = np.array([b])

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        dz = z - self.center
        r = nx.sqrt(nx.sum_(nx.square(dz), axis=1, keepdims=True) + 1e-300)
        denom = self.alpha + r
        bh = self.beta / denom
        out = z + bh * dz
        inner = nx.log(bh + 1.0) * float(self.dim - 1)
        edge = nx.log(self.beta * self.alpha / nx.square(denom) + 1.0)
        return out, nx.sum_(inner + edge, axis=1)

    def inverse(self, t: Tensor) -> Tensor:
        a, b = float(self.alpha.data[0]), float(self.beta.data[0])
        z0 = self.center.data
        dt = t.data - z0
        rt = np.linalg.norm(dt, axis=1, keepdims=True)
        c = a + b - rt
        r = 0.5 * (-c + np.sqrt(c * c + 4.0 * rt * a))
        return Tensor(z0 + dt / (1.0 + b / (a + r)))


@dataclass
class FlowModel:
    """Stack of bijections onto a standard-normal base.

    ``log_prob(z) = N(t; 0, I) + sum of per-layer log|det|``. A model with no
    layers is the plain standard normal.
    """

    dim: int
    layers: list = field(default_factory=list)
    loss_trace: list[float] = field(default_factory=list)
    queries: int = 0
    rows: int = 0

    @property
    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params]

    def forward(self, z) -> tuple[Tensor, Tensor]:
        z = nx.as_tensor(z)
        if z.data.ndim == 1:
            z = Tensor(z.data.reshape(1, -1))
        if z.shape[1] != self.dim:
            raise ValueError(f"flow expects {self.dim}-dimensional features, got {z.shape[1]}")
        log_det = Tensor(np.zeros(z.shape[0]))
        t = z
        for i, layer in enumerate(self.layers):
            t, ld = layer.forward(t)
            if not (np.all(np.isfinite(t.data)) and np.all(np.isfinite(ld.data))):
                raise NumericError(f"non-finite value in flow layer {i} ({layer.kind})")
            log_det = log_det + ld
        return t, log_det

    def inverse(self, t) -> Tensor:
        t = nx.as_tensor(t)
        if t.data.ndim == 1:
            t = Tensor(t.data.reshape(1, -1))
        for layer in reversed(self.layers):
            t = layer.inverse(t)
        return t

    def log_prob_tensor(self, z) -> Tensor:
        t, log_det = self.forward(z)
        base = nx.sum_(nx.square(t), axis=1) * -0.5 - 0.5 * self.dim * LOG_2PI
        return base + log_det

    def log_prob(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        out = self.log_prob_tensor(z).data
        self.queries += 1
        self.rows += out.shape[0]
        return out

    def project(self) -> None:
        for layer in self.layers:
            layer.project()


def make_flow(
    dim: int,
    kind: str = "coupling",
    n_layers: int = 2,
    hidden: int = 16,
    rng: np.random.Generator | None = None,
    center=None,
) -> FlowModel:
    """Build a flow: ``coupling`` (alternating halves), ``radial`` or ``gaussian`` (no layers)."""
    rng = rng if rng is not None else nx.make_rng(0)
    if kind == "coupling":
        layers = [AffineCoupling(dim, hidden, flip=bool(i % 2), rng=rng) for i in range(n_layers)]
    elif kind == "radial":
        layers = [RadialLayer(dim, rng, center=center) for _ in range(n_layers)]
    elif kind == "gaussian":
        layers = []
    else:
        raise ValueError(f"unknown flow kind {kind!r}")
    return FlowModel(dim, layers)


def flow_forward(z, flow: FlowModel) -> tuple[np.ndarray, np.ndarray]:
    t, log_det = flow.forward(z)
    return t.data, log_det.data


def flow_log_prob(z, flow: FlowModel) -> np.ndarray:
    return flow.log_prob(z)


@dataclass
class FlowConfig:
    kind: str = "coupling"
    n_layers: int = 2
    hidden: int = 16
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0


def fit_flow(features, config: FlowConfig | None = None, flow: FlowModel | None = None) -> FlowModel:
    """Maximum-likelihood fit by mini-batch Adam on ``-mean(log_prob)``.

    ``loss_trace`` holds the full-data mean NLL after each epoch. Radial
    centers start at the feature mean unless a ready flow is passed in.
    """
    cfg = config or FlowConfig()
    z = np.asarray(features, dtype=np.float64)
    if z.ndim == 1:
        z = z.reshape(-1, 1)
    if z.shape[0] == 0:
        raise DataError("cannot fit a density to an empty feature set")
    if flow is None:
        flow = make_flow(z.shape[1], cfg.kind, cfg.n_layers, cfg.hidden, nx.make_rng(cfg.seed, 10), center=z.mean(axis=0))
    params = flow.params
    order_rng = nx.make_rng(cfg.seed, 11)
    opt = nx.Adam(params, lr=cfg.lr)
    n = z.shape[0]
    for _ in range(cfg.epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = z[perm[start:start + cfg.batch_size]]
            opt.zero_grad()
            with nx.Tape() as tape:
                loss = nx.mean(flow.log_prob_tensor(batch)) * -1.0
            if not np.isfinite(loss.item()):
                raise NumericError("flow training loss became non-finite")
            tape.backward(loss)
            opt.step()
            flow.project()
        flow.loss_trace.append(float(-np.mean(flow.log_prob_tensor(z).data)))
    return flow


class KdeModel:
    """Exponential-kernel density with the L1 metric.

    ``p(z) = mean_i (2h)^-d exp(-|z - z_i|_1 / h)``, i.e. a product of
    Laplace kernels, so it integrates to one in any dimension. The default
    bandwidth is the median pairwise L1 distance of the support points.
    """

    kind = "kde"

    def __init__(self, support, bandwidth: float | None = None, chunk: int = 256):
        pts = np.asarray(support, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.shape[0] == 0:
            raise DataError("KDE needs at least one support point")
        if bandwidth is None:
            bandwidth = median_l1_bandwidth(pts)
        if not bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {bandwidth}")
        self.support = pts
        self.bandwidth = float(bandwidth)
        self.chunk = chunk
        self.queries = 0
        self.rows = 0

    @property
    def dim(self) -> int:
        return self.support.shape[1]

    @property
    def params(self) -> list[Tensor]:
        return []

    def n_stored(self) -> int:
        return self.support.size + 1

    def log_prob(self, z) -> np.ndarray:
        q = np.asarray(z, dtype=np.float64)
        if q.ndim == 1:
            q = q.reshape(1, -1)
        if q.shape[1] != self.dim:
            raise ValueError(f"KDE expects {self.dim}-dimensional queries, got {q.shape[1]}")
        self.queries += 1
        self.rows += q.shape[0]
        h, n, d = self.bandwidth, self.support.shape[0], self.dim
        norm = -math.log(n) - d * math.log(2.0 * h)
        out = np.empty(q.shape[0])
        for start in range(0, q.shape[0], self.chunk):
            block = q[start:start + self.chunk]
            dist = np.abs(block[:, None, :] - self.support[None, :, :]).sum(axis=2)
            out[start:start + self.chunk] = logsumexp(-dist / h, axis=1) + norm
        return out


def median_l1_bandwidth(points: np.ndarray, max_points: int = 2000) -> float:
    pts = points[:max_points]
    if pts.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(pts, metric="cityblock")))
    return med if med > 0 else 1.0


def kde_log_prob(z, kde: KdeModel) -> np.ndarray:
    return kde.log_prob(z)


def fit_kde(features, bandwidth: float | None = None) -> KdeModel:
    return KdeModel(features, bandwidth)
