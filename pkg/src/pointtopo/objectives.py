"""Losses on motion features and the reference-feature file format.

Every loss returns its value together with the cotangent needed by the
adjoint sweep (with respect to rigid properties, a tilt signal, or particle
positions).

Reference files are CSV. The first row is ``kind,<kind>``, the second the
column header for that kind, then the data::

    com_target     x,y,z
    oscillation    period,max_tilt
    bend_angle     angle
    pivot_tracks   particle_id,t,x,y,z
    pose_sequence  capacity,tilt,height
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

SCHEMAS = {
    "com_target": ["x", "y", "z"],
    "oscillation": ["period", "max_tilt"],
    "bend_angle": ["angle"],
    "pivot_tracks": ["particle_id", "t", "x", "y", "z"],
    "pose_sequence": ["capacity", "tilt", "height"],
}


class ObjectiveError(ValueError):
    pass


class InsufficientOscillation(ObjectiveError):
    def __init__(self):
        super().__init__("insufficient oscillation")


# ---------------------------------------------------------------------------
# reference features

@dataclass
class MotionFeatures:
    kind: str
    target: np.ndarray | None = None
    period: float | None = None
    max_tilt: float | None = None
    angle: float | None = None
    tracks: dict = field(default_factory=dict)        # id -> (times, (T, 3) points)
    levels: np.ndarray | None = None                  # (L, 3): capacity, tilt, height

    def __post_init__(self):
        if self.kind not in SCHEMAS:
            raise ObjectiveError(f"unknown feature kind {self.kind!r}")
        for pid, (t, _) in self.tracks.items():
            if np.any(np.diff(t) <= 0):
                raise ObjectiveError(f"track {pid}: times must be strictly increasing")
        for a in (self.max_tilt, self.angle):
            if a is not None and not -np.pi < a <= np.pi:
                raise ObjectiveError("angles must lie in (-pi, pi]")

    def rows(self):
        if self.kind == "com_target":
            return [list(self.target)]
        if self.kind == "oscillation":
            return [[self.period, self.max_tilt]]
        if self.kind == "bend_angle":
            return [[self.angle]]
        if self.kind == "pivot_tracks":
            return [[pid, t, *p] for pid, (ts, ps) in sorted(self.tracks.items()) for t, p in zip(ts, ps)]
        return [list(r) for r in self.levels]


def save_reference(path, feats: MotionFeatures):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", feats.kind])
        w.writerow(SCHEMAS[feats.kind])
        for row in feats.rows():
            w.writerow([int(v) if i == 0 and feats.kind == "pivot_tracks" else repr(float(v))
                        for i, v in enumerate(row)])


def load_reference(path) -> MotionFeatures:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2 or rows[0][0].strip() != "kind" or len(rows[0]) < 2:
        raise ObjectiveError(f"{path}: first row must be 'kind,<kind>'")
    kind = rows[0][1].strip()
    if kind not in SCHEMAS:
        raise ObjectiveError(f"{path}: unknown feature kind {kind!r}")
    header = [h.strip() for h in rows[1]]
    if header != SCHEMAS[kind]:
        raise ObjectiveError(f"{path}: expected columns {','.join(SCHEMAS[kind])}, got {','.join(header)}")
    try:
        data = np.array([[float(v) for v in r] for r in rows[2:]], dtype=float).reshape(-1, len(header))
    except ValueError as exc:
        raise ObjectiveError(f"{path}: {exc}") from None
    if len(data) == 0:
        raise ObjectiveError(f"{path}: no data rows")
    if kind == "com_target":
        return MotionFeatures(kind, target=data[0])
    if kind == "oscillation":
        return MotionFeatures(kind, period=float(data[0, 0]), max_tilt=float(data[0, 1]))
    if kind == "bend_angle":
        return MotionFeatures(kind, angle=float(data[0, 0]))
    if kind == "pivot_tracks":
        tracks = {}
        for pid in np.unique(data[:, 0]).astype(int):
            sel = data[data[:, 0] == pid]
            tracks[int(pid)] = (sel[:, 1], sel[:, 2:5])
        return MotionFeatures(kind, tracks=tracks)
    return MotionFeatures(kind, levels=data[np.argsort(data[:, 0], kind="stable")])


# ---------------------------------------------------------------------------
# rigid statics

def loss_com(props, target):
    """|c - target|^2 with its cotangent on the 10-vector (m, c, I)."""
    d = props.com - np.asarray(target, dtype=float)
    bar = np.zeros(10)
    bar[1:4] = 2.0 * d
    return float(d @ d), bar


# ---------------------------------------------------------------------------
# oscillation

@dataclass
class Oscillation:
    period: float
    max_tilt: float          # smooth maximum of |angle|
    max_tilt_hard: float
    crossings: np.ndarray
    d_period: np.ndarray     # d period / d angle_k
    d_max_tilt: np.ndarray

    @property
    def frequency(self):
        return 1.0 / self.period


def extract_oscillation(times, angle, temperature=1e-3) -> Oscillation:
    """Period from the mean spacing of upward zero crossings, max tilt by log-sum-exp."""
    t = np.asarray(times, dtype=float)
    a = np.asarray(angle, dtype=float)
    ks = np.flatnonzero((a[:-1] < 0) & (a[1:] >= 0))
    if len(ks) < 2:
        raise InsufficientOscillation()
    dt = t[ks + 1] - t[ks]
    frac = a[ks] / (a[ks] - a[ks + 1])
    tc = t[ks] + dt * frac
    n = len(ks)
    period = (tc[-1] - tc[0]) / (n - 1)
    d_period = np.zeros_like(a)
    for sign, k, h in ((1.0, ks[-1], dt[-1]), (-1.0, ks[0], dt[0])):
        a0, a1 = a[k], a[k + 1]
        den = (a0 - a1) ** 2
        # d frac / d a0 = -a1 / den, d frac / d a1 = a0 / den
        d_period[k] += sign * h * (-a1 / den) / (n - 1)
        d_period[k + 1] += sign * h * (a0 / den) / (n - 1)
    z = np.concatenate([a, -a]) / temperature
    zmax = z.max()
    e = np.exp(z - zmax)
    soft = temperature * (zmax + np.log(e.sum()))
    p = e / e.sum()
    d_max = p[:len(a)] - p[len(a):]
    return Oscillation(float(period), float(soft), float(np.max(np.abs(a))), tc, d_period, d_max)


def loss_oscillation(times, angle, target_period, target_tilt, weights=(1.0, 1.0), temperature=1e-3):
    """w1 (T - T*)^2 + w2 (theta_max - theta*)^2; returns (value, d value / d angle, features)."""
    osc = extract_oscillation(times, angle, temperature)
    w1, w2 = weights
    eT = osc.period - target_period
    eA = osc.max_tilt - target_tilt
    value = w1 * eT ** 2 + w2 * eA ** 2
    bar = 2 * w1 * eT * osc.d_period + 2 * w2 * eA * osc.d_max_tilt
    return float(value), bar, osc


# ---------------------------------------------------------------------------
# soft-body features

def bend_angle(x, base, tip, normal=(0.0, 1.0, 0.0)):
    """Signed angle from the base segment to the tip segment about ``normal``."""
    x = np.asarray(x, dtype=float)
    n = np.asarray(normal, dtype=float)
    d1 = x[base[1]] - x[base[0]]
    d2 = x[tip[1]] - x[tip[0]]
    if np.linalg.norm(d1) < 1e-15 or np.linalg.norm(d2) < 1e-15:
        raise ObjectiveError("degenerate marker segment")
    return float(np.arctan2(n @ np.cross(d1, d2), d1 @ d2))


def bend_angle_vjp(x, base, tip, normal=(0.0, 1.0, 0.0), a_bar=1.0):
    x = np.asarray(x, dtype=float)
    n = np.asarray(normal, dtype=float)
    d1 = x[base[1]] - x[base[0]]
    d2 = x[tip[1]] - x[tip[0]]
    s = n @ np.cross(d1, d2)
    c = d1 @ d2
    den = s * s + c * c
    ds, dc = c / den, -s / den
    g1 = a_bar * (ds * np.cross(d2, n) + dc * d2)
    g2 = a_bar * (ds * np.cross(n, d1) + dc * d1)
    out = np.zeros_like(x)
    out[base[1]] += g1
    out[base[0]] -= g1
    out[tip[1]] += g2
    out[tip[0]] -= g2
    return out


def loss_bend_angle(x, base, tip, target, normal=(0.0, 1.0, 0.0)):
    a = bend_angle(x, base, tip, normal)
    e = a - target
    return float(e * e), bend_angle_vjp(x, base, tip, normal, 2.0 * e), a


def resample_track(times, points, new_times):
    return np.stack([np.interp(new_times, times, points[:, k]) for k in range(3)], axis=1)


def loss_pivot_tracks(times, tracked_ids, positions, reference: dict):
    """sum_t sum_p |x_p(t) - x*_p(t)|^2 / (number of samples).

    ``positions`` is (T, P, 3) for ``tracked_ids``; reference tracks are
    resampled onto ``times`` by linear interpolation when their timestamps
    differ. Returns (value, cotangent with the shape of ``positions``).
    """
    times = np.asarray(times, dtype=float)
    ids = [int(i) for i in tracked_ids]
    bar = np.zeros_like(positions)
    value = 0.0
    for pid, (rt, rp) in reference.items():
        if int(pid) not in ids:
            raise ObjectiveError(f"track id {pid} not found among simulated particles")
        col = ids.index(int(pid))
        rt = np.asarray(rt, dtype=float)
        rp = np.asarray(rp, dtype=float)
        ref = rp if len(rt) == len(times) and np.array_equal(rt, times) else resample_track(rt, rp, times)
        d = positions[:, col] - ref
        value += float(np.sum(d * d))
        bar[:, col] += 2.0 * d
    T = len(times)
    return value / T, bar / T


# ---------------------------------------------------------------------------
# pose sequence (water-filled shell)

@dataclass
class PoseModel:
    """Shell + water model for a pivoting body.

    At capacity kappa the hollow fraction (1 - r_i) of every particle whose
    rest height is below z_min + kappa (z_max - z_min) holds water of density
    ``water_density``. The resting tilt is the angle of (c - pivot) from the
    gravity direction about ``axis``; the height is c_z.
    """

    pivot: np.ndarray
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    gravity_dir: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))
    density: float = 1000.0
    water_density: float = 1000.0


def _level_masses(cloud, r, model, kappa):
    z = cloud.rest_positions[:, 2]
    zl = z.min() + kappa * (z.max() - z.min())
    wet = (z <= zl).astype(float)
    base = model.density * cloud.volumes
    water = model.water_density * cloud.volumes * wet
    return base * r + water * (1.0 - r), base - water


def pose_at_level(cloud, r, model, kappa):
    m, _ = _level_masses(cloud, r, model, kappa)
    c = (m @ cloud.rest_positions) / m.sum()
    e1 = model.gravity_dir
    e2 = np.cross(model.axis, e1)
    u = c - model.pivot
    return float(np.arctan2(u @ e2, u @ e1)), float(c[2]), c


def loss_pose_sequence(cloud, r, model: PoseModel, levels, weights=(1.0, 1.0)):
    """Sum over levels of w_t (tilt - tilt*)^2 + w_h (height - height*)^2; returns (value, r cotangent)."""
    levels = np.asarray(levels, dtype=float).reshape(-1, 3)
    caps = levels[:, 0]
    if np.any(caps < 0) or np.any(caps > 1) or np.any(np.diff(caps) < 0):
        raise ObjectiveError("capacity levels must be sorted within [0, 1]")
    X = cloud.rest_positions
    e1 = model.gravity_dir
    e2 = np.cross(model.axis, e1)
    wt, wh = weights
    value = 0.0
    r_bar = np.zeros(len(X))
    for kappa, tilt_t, h_t in levels:
        m, dm_dr = _level_masses(cloud, r, model, kappa)
        M = m.sum()
        c = (m @ X) / M
        u = c - model.pivot
        a, b = u @ e1, u @ e2
        tilt = np.arctan2(b, a)
        et, eh = tilt - tilt_t, c[2] - h_t
        value += wt * et ** 2 + wh * eh ** 2
        c_bar = 2 * wt * et * (a * e2 - b * e1) / (a * a + b * b)
        c_bar[2] += 2 * wh * eh
        r_bar += dm_dr * ((X - c) @ c_bar) / M
    return float(value), r_bar


# ---------------------------------------------------------------------------
# weighted multi-reference objectives

@dataclass
class WeightedSum:
    """Weighted sum of objectives that each map params -> (value, grad)."""

    terms: list   # [(weight, fun)]

    def __call__(self, x):
        total, grad = 0.0, None
        for w, fun in self.terms:
            v, g = fun(x)
            total += w * v
            grad = w * np.asarray(g) if grad is None else grad + w * np.asarray(g)
        return total, grad
