"""Topology parameterizations mapping particles to a material indicator in (0, 1).

Three representations share one protocol: ``params()`` / ``with_params(v)``
for the flat decision vector, ``with_beta(b)`` for sigmoid sharpness, and
``indicator(cloud, pin_boundary)`` returning an :class:`IndicatorField` whose
``vjp`` pulls an r-cotangent back to the parameters.

Sign convention for the surface representations: SDF < 0 is solid (r -> 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import snapshot

PINNED_VALUE = 1.0 - 1e-9


class TopologyError(ValueError):
    pass


def _mm(a, b):
    # einsum without path optimization never calls BLAS, so the summation
    # order (and every output bit) is independent of the thread count
    return np.einsum("ij,jk->ik", a, b)


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class IndicatorField:
    r: np.ndarray
    pullback: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    pinned: np.ndarray | None = None

    def vjp(self, r_bar) -> np.ndarray:
        r_bar = np.asarray(r_bar, dtype=float)
        if len(r_bar) != len(self.r):
            raise TopologyError(f"cotangent length {len(r_bar)} != particle count {len(self.r)}")
        if self.pinned is not None:
            r_bar = np.where(self.pinned, 0.0, r_bar)
        return self.pullback(r_bar)


def _positions(cloud):
    return cloud.rest_positions if hasattr(cloud, "rest_positions") else np.asarray(cloud, dtype=float)


def _pin(r, cloud, pin_boundary):
    if not pin_boundary:
        return r, None
    mask = np.asarray(cloud.boundary_flags, dtype=bool)
    return np.where(mask, PINNED_VALUE, r), mask


# ---------------------------------------------------------------------------
# point representation

@dataclass
class PointField:
    theta: np.ndarray
    beta: float = 10.0

    kind = "point_field"

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).ravel()
        if not self.beta > 0:
            raise TopologyError("beta must be positive")

    @classmethod
    def uniform(cls, n, r0=0.5, beta=10.0):
        return cls(np.full(n, np.log(r0 / (1 - r0)) / beta), beta)

    def params(self):
        return self.theta.copy()

    def with_params(self, v):
        return replace(self, theta=np.array(v, dtype=float))

    def with_beta(self, beta):
        return replace(self, beta=float(beta))

    @property
    def num_params(self):
        return len(self.theta)

    def indicator(self, cloud, pin_boundary=False):
        return eval_point_field(self, cloud, pin_boundary)

    def to_snapshot(self):
        return snapshot.Snapshot(self.kind, {"beta": self.beta}, {"theta": self.theta})

    @classmethod
    def from_snapshot(cls, snap):
        return cls(snap.arrays["theta"], snap.meta["beta"])


def eval_point_field(field_: PointField, cloud, pin_boundary=False) -> IndicatorField:
    n = len(_positions(cloud))
    if len(field_.theta) != n:
        raise TopologyError(f"point field has {len(field_.theta)} values for {n} particles")
    r = sigmoid(field_.beta * field_.theta)
    slope = field_.beta * r * (1.0 - r)
    r, mask = _pin(r, cloud, pin_boundary)
    return IndicatorField(r, lambda rb: rb * slope, mask)


# ---------------------------------------------------------------------------
# surface representations

class _SDFMixin:
    def indicator(self, cloud, pin_boundary=False):
        return eval_sdf_field(self, cloud, pin_boundary)

    def with_beta(self, beta):
        return replace(self, beta=float(beta))

    def r_at(self, points):
        return sigmoid(-self.beta * self.sdf(points))


_QUAD_IDX = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]


@dataclass
class QuadricSDF(_SDFMixin):
    """s(x) = x^T A x + b^T x + c evaluated on x normalized by ``center``/``scale``."""

    A: np.ndarray
    b: np.ndarray
    c: float
    beta: float = 10.0
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    kind = "quadric_sdf"

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float).reshape(3, 3)
        if np.max(np.abs(self.A - self.A.T)) > 1e-12:
            raise TopologyError("quadric matrix A must be symmetric")
        self.A = 0.5 * (self.A + self.A.T)
        self.b = np.asarray(self.b, dtype=float).reshape(3)
        self.c = float(self.c)
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        if not self.beta > 0:
            raise TopologyError("beta must be positive")

    num_params = 10

    @classmethod
    def solid(cls, r0=0.95, beta=10.0, center=(0, 0, 0), scale=1.0):
        """Constant field with r = r0 everywhere."""
        return cls(np.zeros((3, 3)), np.zeros(3), -np.log(r0 / (1 - r0)) / beta, beta,
                   np.asarray(center, dtype=float), scale)

    @classmethod
    def sphere(cls, center, radius, beta=10.0, frame_center=(0, 0, 0), scale=1.0, solid_inside=True):
        """Quadric whose zero set is a sphere (in normalized coordinates)."""
        x0 = (np.asarray(center, dtype=float) - frame_center) / scale
        rad = radius / scale
        sign = 1.0 if solid_inside else -1.0
        return cls(sign * np.eye(3), -2 * sign * x0, sign * (x0 @ x0 - rad ** 2), beta,
                   np.asarray(frame_center, dtype=float), scale)

    def params(self):
        return np.array([self.A[i, j] for i, j in _QUAD_IDX] + list(self.b) + [self.c])

    def with_params(self, v):
        v = np.asarray(v, dtype=float)
        A = np.zeros((3, 3))
        for k, (i, j) in enumerate(_QUAD_IDX):
            A[i, j] = A[j, i] = v[k]
        return replace(self, A=A, b=v[6:9].copy(), c=float(v[9]))

    def _normalized(self, points):
        return (np.asarray(points, dtype=float) - self.center) / self.scale

    def sdf(self, points):
        x = self._normalized(points)
        return np.einsum("ni,ij,nj->n", x, self.A, x) + np.einsum("ni,i->n", x, self.b) + self.c

    def sdf_vjp(self, points, s_bar):
        x = self._normalized(points)
        outer = np.einsum("n,ni,nj->ij", s_bar, x, x)
        gA = [outer[i, j] if i == j else 2.0 * outer[i, j] for i, j in _QUAD_IDX]
        return np.concatenate([gA, np.einsum("n,ni->i", s_bar, x), [s_bar.sum()]])

    def to_snapshot(self):
        meta = {"beta": self.beta, "scale": self.scale}
        return snapshot.Snapshot(self.kind, meta, {"params": self.params(), "center": self.center})

    @classmethod
    def from_snapshot(cls, snap):
        base = cls(np.zeros((3, 3)), np.zeros(3), 0.0, snap.meta["beta"],
                   snap.arrays["center"], snap.meta["scale"])
        return base.with_params(snap.arrays["params"])


@dataclass
class NeuralSDF(_SDFMixin):
    """Fully connected rectifier network R^3 -> R.

    ``weights[k]`` has shape (out, in). With weight normalization the stored
    matrices are directions v and the effective weight is g * v / |v| per
    output row, with gains held in ``gains``.
    """

    weights: list
    biases: list
    beta: float = 10.0
    dropout_rate: float = 0.0
    gains: list | None = None
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    kind = "neural_sdf"

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        if self.gains is not None:
            self.gains = [np.asarray(g, dtype=float) for g in self.gains]
        if self.weights[0].shape[1] != 3 or self.weights[-1].shape[0] != 1:
            raise TopologyError("network must map 3 inputs to 1 output")
        for w, nxt in zip(self.weights, self.weights[1:]):
            if w.shape[0] != nxt.shape[1]:
                raise TopologyError("layer widths do not chain")
        if not 0 <= self.dropout_rate < 1:
            raise TopologyError("dropout_rate must lie in [0, 1)")

    @classmethod
    def create(cls, hidden=(64, 64, 64), seed=0, beta=10.0, weight_norm=False,
               init_scale=1.0, output_bias=0.0, dropout_rate=0.0, center=(0, 0, 0), scale=1.0):
        """He-initialized network; ``hidden`` lists hidden-layer widths.

        The layer count is ``len(hidden) + 1``; a full-size network of
        eight 512-wide layers is ``hidden=(512,) * 7``.
        """
        rng = np.random.default_rng(seed)
        widths = [3, *hidden, 1]
        weights, biases = [], []
        for k, (a, b) in enumerate(zip(widths, widths[1:])):
            std = np.sqrt(2.0 / a) * (init_scale if k == len(widths) - 2 else 1.0)
            weights.append(rng.normal(0.0, std, (b, a)))
            biases.append(np.zeros(b))
        biases[-1][:] = output_bias
        gains = None
        if weight_norm:
            gains = [np.linalg.norm(w, axis=1) for w in weights]
        return cls(weights, biases, beta, dropout_rate, gains, np.asarray(center, dtype=float), scale)

    @property
    def layer_widths(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def num_params(self):
        return len(self.params())

    def _effective(self):
        if self.gains is None:
            return self.weights
        return [g[:, None] * v / np.linalg.norm(v, axis=1, keepdims=True)
                for v, g in zip(self.weights, self.gains)]

    def params(self):
        parts = []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            parts += [w.ravel(), b]
            if self.gains is not None:
                parts.append(self.gains[k])
        return np.concatenate(parts)

    def with_params(self, v):
        v = np.asarray(v, dtype=float)
        weights, biases, gains = [], [], [] if self.gains is not None else None
        pos = 0
        for w, b in zip(self.weights, self.biases):
            weights.append(v[pos:pos + w.size].reshape(w.shape))
            pos += w.size
            biases.append(v[pos:pos + b.size].copy())
            pos += b.size
            if gains is not None:
                gains.append(v[pos:pos + w.shape[0]].copy())
                pos += w.shape[0]
        if pos != len(v):
            raise TopologyError(f"expected {pos} parameters, got {len(v)}")
        return replace(self, weights=weights, biases=biases, gains=gains)

    def forward(self, points, rng=None):
        """Returns (s, cache). Dropout is active only when ``rng`` is given."""
        x = (np.asarray(points, dtype=float) - self.center) / self.scale
        W = self._effective()
        acts, masks = [x], []
        h = x
        for k, (w, b) in enumerate(zip(W, self.biases)):
            z = _mm(h, w.T) + b
            if k == len(W) - 1:
                h = z
                break
            h = np.maximum(z, 0.0)
            if rng is not None and self.dropout_rate > 0:
                keep = (rng.random(h.shape) >= self.dropout_rate) / (1.0 - self.dropout_rate)
                h = h * keep
                masks.append(keep)
            else:
                masks.append(None)
            acts.append(h)
        return h[:, 0], (acts, masks, W)

    def sdf(self, points):
        return self.forward(points)[0]

    def sdf_vjp(self, points, s_bar, cache=None):
        if cache is None:
            _, cache = self.forward(points)
        acts, masks, W = cache
        grads_w, grads_b = [None] * len(W), [None] * len(W)
        delta = np.asarray(s_bar, dtype=float)[:, None]
        for k in range(len(W) - 1, -1, -1):
            grads_w[k] = _mm(delta.T, acts[k])
            grads_b[k] = delta.sum(axis=0)
            if k == 0:
                break
            delta = _mm(delta, W[k])
            if masks[k - 1] is not None:
                delta = delta * masks[k - 1]
            delta = delta * (acts[k] > 0)
        parts = []
        for k in range(len(W)):
            gw = grads_w[k]
            if self.gains is not None:
                v, g = self.weights[k], self.gains[k]
                nv = np.linalg.norm(v, axis=1, keepdims=True)
                u = v / nv
                g_gain = np.sum(gw * u, axis=1)
                gv = (g[:, None] / nv) * (gw - g_gain[:, None] * u)
                parts += [gv.ravel(), grads_b[k], g_gain]
            else:
                parts += [gw.ravel(), grads_b[k]]
        return np.concatenate(parts)

    def to_snapshot(self):
        arrays = {"params": self.params(), "widths": np.array(self.layer_widths), "center": self.center}
        meta = {"beta": self.beta, "dropout_rate": self.dropout_rate,
                "weight_norm": self.gains is not None, "scale": self.scale}
        return snapshot.Snapshot(self.kind, meta, arrays)

    @classmethod
    def from_snapshot(cls, snap):
        widths = [int(w) for w in snap.arrays["widths"]]
        net = cls.create(tuple(widths[1:-1]), beta=snap.meta["beta"],
                         weight_norm=snap.meta["weight_norm"], dropout_rate=snap.meta["dropout_rate"],
                         center=snap.arrays["center"], scale=snap.meta["scale"])
        return net.with_params(snap.arrays["params"])


def eval_sdf_field(sdf, cloud, pin_boundary=False) -> IndicatorField:
    x = _positions(cloud)
    if isinstance(sdf, NeuralSDF):
        s, cache = sdf.forward(x)
    else:
        s, cache = sdf.sdf(x), None
    bad = np.flatnonzero(~np.isfinite(s))
    if len(bad):
        raise FloatingPointError(f"non-finite SDF value at particle {bad[0]}")
    r = sigmoid(-sdf.beta * s)
    dr_ds = -sdf.beta * r * (1.0 - r)
    r, mask = _pin(r, cloud, pin_boundary)

    def pullback(r_bar):
        s_bar = r_bar * dr_ds
        if cache is not None:
            return sdf.sdf_vjp(x, s_bar, cache)
        return sdf.sdf_vjp(x, s_bar)
    return IndicatorField(r, pullback, mask)


def sdf_param_gradient(sdf, cloud, upstream, pin_boundary=False) -> np.ndarray:
    """dLoss/dparams for an r-cotangent ``upstream`` (one entry per particle)."""
    upstream = np.asarray(upstream, dtype=float)
    n = len(_positions(cloud))
    if len(upstream) != n:
        raise TopologyError(f"upstream length {len(upstream)} != particle count {n}")
    grad = eval_sdf_field(sdf, cloud, pin_boundary).vjp(upstream)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite SDF parameter gradient")
    return grad


def quadric_matrix_gradient(grad10) -> tuple[np.ndarray, np.ndarray, float]:
    """Convert a 10-vector gradient into (dA as a symmetric matrix, db, dc).

    The matrix form spreads each off-diagonal derivative evenly over the two
    mirrored entries, so ``sum(dA * dA_dir)`` reproduces the directional
    derivative for any symmetric perturbation.
    """
    dA = np.zeros((3, 3))
    for k, (i, j) in enumerate(_QUAD_IDX):
        if i == j:
            dA[i, i] = grad10[k]
        else:
            dA[i, j] = dA[j, i] = 0.5 * grad10[k]
    return dA, np.asarray(grad10[6:9]), float(grad10[9])


def smoothing_hook(r: np.ndarray, cloud=None) -> np.ndarray:
    """Placeholder filter on the point field; the pipeline applies none."""
    return r


def beta_schedule(beta0, iteration, every=50, factor=2.0, beta_max=1e3):
    if every is None or every <= 0:
        return beta0
    return float(min(beta0 * factor ** (iteration // every), beta_max))


# ---------------------------------------------------------------------------
# neural training loop

@dataclass
class TrainSchedule:
    epochs: int = 10000
    lr: float = 3e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


@dataclass
class TrainResult:
    sdf: NeuralSDF
    losses: list
    metadata: dict
    diverged: bool = False


def train_neural_sdf(sdf: NeuralSDF, grad_fn, schedule: TrainSchedule = TrainSchedule()) -> TrainResult:
    """Adam on the network parameters.

    ``grad_fn(net, rng)`` returns ``(loss, grad)``; ``rng`` drives dropout and
    is ``None`` when the network has no dropout. On a non-finite loss the last
    finite parameters are returned with ``diverged=True``.
    """
    from .optimizer import AdamState

    rng = np.random.default_rng(schedule.seed) if sdf.dropout_rate > 0 else None
    params = sdf.params()
    state = AdamState.zeros(len(params))
    losses = []
    meta = {"epochs": schedule.epochs, "lr": schedule.lr, "optimizer": "adam",
            "dropout_rate": sdf.dropout_rate, "weight_norm": sdf.gains is not None,
            "layer_widths": sdf.layer_widths}
    current = last_good = sdf
    for _ in range(schedule.epochs):
        loss, grad = grad_fn(current, rng)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            return TrainResult(last_good, losses, meta, diverged=True)
        last_good = current
        losses.append(float(loss))
        params = state.step(params, grad, schedule.lr, schedule.beta1, schedule.beta2, schedule.eps)
        current = current.with_params(params)
    return TrainResult(current, losses, meta)


def from_snapshot(snap):
    kinds = {cls.kind: cls for cls in (PointField, QuadricSDF, NeuralSDF)}
    if snap.kind not in kinds:
        raise snapshot.SnapshotError(f"unknown topology kind {snap.kind!r}")
    return kinds[snap.kind].from_snapshot(snap)
