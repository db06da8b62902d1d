"""Topology-dependent rigid-body properties and Newton-Euler integration (RK2).

State vector layout (13 entries): position of the center of mass (3),
orientation quaternion (w, x, y, z), linear velocity (3), body-frame angular
velocity (3). The body frame has its origin at the center of mass and is
aligned with the world frame in the rest configuration.

Pin and pivot constraints hold a material point (given in rest coordinates)
at a fixed world location. The rotational dynamics are integrated about that
point with the parallel-axis inertia; afterwards the center position and
velocity are projected onto the constraint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROP_SIZE = 10
STATE_SIZE = 13


class RigidSimError(RuntimeError):
    pass


class NonFiniteRigidState(RigidSimError):
    def __init__(self, step):
        super().__init__(f"non-finite rigid state at step {step}")
        self.step = step


def _sym_from6(v):
    I = np.empty(v.shape[:-1] + (3, 3), dtype=v.dtype)
    I[..., 0, 0], I[..., 1, 1], I[..., 2, 2] = v[..., 0], v[..., 1], v[..., 2]
    I[..., 0, 1] = I[..., 1, 0] = v[..., 3]
    I[..., 0, 2] = I[..., 2, 0] = v[..., 4]
    I[..., 1, 2] = I[..., 2, 1] = v[..., 5]
    return I


def _six_from_sym(I):
    return np.stack([I[..., 0, 0], I[..., 1, 1], I[..., 2, 2], I[..., 0, 1], I[..., 0, 2], I[..., 1, 2]], axis=-1)


@dataclass
class RigidProps:
    mass: float
    com: np.ndarray
    inertia: np.ndarray

    def __post_init__(self):
        self.com = np.asarray(self.com, dtype=float)
        self.inertia = np.asarray(self.inertia, dtype=float)

    def vector(self):
        return np.concatenate([[self.mass], self.com, _six_from_sym(self.inertia)])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v)
        return cls(float(v[0].real), v[1:4].real.copy(), _sym_from6(v[4:10].real))


def cross_matrix(d):
    d = np.asarray(d)
    out = np.zeros(d.shape[:-1] + (3, 3), dtype=d.dtype)
    out[..., 0, 1], out[..., 0, 2] = -d[..., 2], d[..., 1]
    out[..., 1, 0], out[..., 1, 2] = d[..., 2], -d[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -d[..., 1], d[..., 0]
    return out


def particle_masses(cloud, r, density):
    r = np.asarray(r, dtype=float)
    return density * cloud.volumes * r


def rigid_props(cloud, r, density) -> RigidProps:
    """m = sum m_i, c = sum m_i X_i / m, I = -sum m_i [X_i - c][X_i - c] with m_i = rho V_i r_i."""
    if not density > 0:
        raise ValueError("density must be positive")
    r = getattr(r, "r", r)
    mi = particle_masses(cloud, r, density)
    m = float(mi.sum())
    if m < 1e-9 * density * cloud.total_volume:
        raise RigidSimError("vanishing mass")
    X = cloud.rest_positions
    c = (mi @ X) / m
    K = cross_matrix(X - c)
    I = -np.einsum("n,nij,njk->ik", mi, K, K)
    return RigidProps(m, c, 0.5 * (I + I.T))


def inertia_bruteforce(masses, X, c):
    d = X - c
    return np.einsum("n,nij->ij", masses, np.einsum("n,ij->nij", np.sum(d * d, axis=1), np.eye(3))
                     - d[:, :, None] * d[:, None, :])


def rigid_props_vjp(cloud, r, density, props: RigidProps, prop_bar):
    """Indicator cotangent from a 10-vector cotangent on (m, c, I)."""
    prop_bar = np.asarray(prop_bar, dtype=float)
    m_bar, c_bar = prop_bar[0], prop_bar[1:4]
    I_bar = _sym_from6(prop_bar[4:10] * np.array([1, 1, 1, 0.5, 0.5, 0.5]))
    X = cloud.rest_positions
    d = X - props.com
    dI = np.sum(d * d, axis=1) * np.trace(I_bar) - np.einsum("ni,ij,nj->n", d, I_bar, d)
    mi_bar = m_bar + d @ c_bar / props.mass + dI
    return density * cloud.volumes * mi_bar


# ---------------------------------------------------------------------------
# scene

@dataclass
class PinPoint:
    anchor: np.ndarray
    attach: np.ndarray

    kind = "pin"

    def __post_init__(self):
        self.anchor = np.asarray(self.anchor, dtype=float)
        self.attach = np.asarray(self.attach, dtype=float)


@dataclass
class PivotAxis:
    point: np.ndarray
    axis: np.ndarray
    attach: np.ndarray | None = None

    kind = "pivot"

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float)
        self.axis = np.asarray(self.axis, dtype=float)
        if abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
            raise ValueError("pivot axis must have unit length")
        self.attach = self.point.copy() if self.attach is None else np.asarray(self.attach, dtype=float)

    @property
    def anchor(self):
        return self.point


@dataclass
class RigidScene:
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    constraint: PinPoint | PivotAxis | None = None
    damping: float = 0.0

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float)
        if self.damping < 0:
            raise ValueError("damping must be non-negative")


@dataclass
class RigidState:
    position: np.ndarray
    orientation: np.ndarray
    velocity: np.ndarray
    omega: np.ndarray

    def vector(self):
        return np.concatenate([self.position, self.orientation, self.velocity, self.omega])

    @classmethod
    def from_vector(cls, y):
        y = np.asarray(y).real
        return cls(y[0:3].copy(), y[3:7].copy(), y[7:10].copy(), y[10:13].copy())


# ---------------------------------------------------------------------------
# quaternion helpers (batched, complex-safe: no abs/conj)

def quat_to_matrix(q):
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_mul(a, b):
    aw, av = a[..., :1], a[..., 1:]
    bw, bv = b[..., :1], b[..., 1:]
    w = aw * bw - np.sum(av * bv, axis=-1, keepdims=True)
    v = aw * bv + bw * av + np.cross(av, bv)
    return np.concatenate([w, v], axis=-1)


def quat_from_matrix(R):
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    else:
        k = int(np.argmax(np.diag(R)))
        i, j = (k + 1) % 3, (k + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[k, k] - R[i, i] - R[j, j])
        q = np.zeros(4)
        q[0] = (R[j, i] - R[i, j]) / s
        q[1 + k] = 0.25 * s
        q[1 + i] = (R[i, k] + R[k, i]) / s
        q[1 + j] = (R[j, k] + R[k, j]) / s
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


# ---------------------------------------------------------------------------
# dynamics

def _deriv(y, P, scene: RigidScene):
    m = P[:, 0]
    c = P[:, 1:4]
    I = _sym_from6(P[:, 4:10])
    q, v, w = y[:, 3:7], y[:, 7:10], y[:, 10:13]
    R = quat_to_matrix(q)
    g = scene.gravity
    d = scene.damping
    con = scene.constraint
    dq = 0.5 * quat_mul(q, np.concatenate([np.zeros_like(w[:, :1]), w], axis=1))
    if con is None:
        Iw = np.einsum("bij,bj->bi", I, w)
        dw = np.linalg.solve(I, (-np.cross(w, Iw))[..., None])[..., 0] - d * w
        dv = np.broadcast_to(g, v.shape) - d * v
        return np.concatenate([v, dq, dv, dw], axis=1)
    s = con.attach - c
    ss = np.sum(s * s, axis=1)
    Ip = I + m[:, None, None] * (ss[:, None, None] * np.eye(3) - s[:, :, None] * s[:, None, :])
    g_body = np.einsum("bji,j->bi", R, g)
    tau = np.cross(-s, m[:, None] * g_body)
    rhs = tau - np.cross(w, np.einsum("bij,bj->bi", Ip, w))
    if con.kind == "pin":
        dw = np.linalg.solve(Ip, rhs[..., None])[..., 0]
    else:
        a = np.einsum("bji,j->bi", R, con.axis)
        denom = np.einsum("bi,bij,bj->b", a, Ip, a)
        dw = a * (np.sum(a * rhs, axis=1) / denom)[:, None]
    dw = dw - d * w
    dp = np.einsum("bij,bj->bi", R, np.cross(w, -s))
    return np.concatenate([dp, dq, np.zeros_like(v), dw], axis=1)


def _project(y, P, scene):
    q = y[:, 3:7]
    q = q / np.sqrt(np.sum(q * q, axis=1, keepdims=True))
    y = np.concatenate([y[:, :3], q, y[:, 7:]], axis=1)
    con = scene.constraint
    if con is None:
        return y
    R = quat_to_matrix(q)
    s = con.attach - P[:, 1:4]
    w = y[:, 10:13]
    if con.kind == "pivot":
        a = np.einsum("bji,j->bi", R, con.axis)
        w = a * np.sum(a * w, axis=1, keepdims=True)
    pos = con.anchor - np.einsum("bij,bj->bi", R, s)
    vel = np.einsum("bij,bj->bi", R, np.cross(w, -s))
    return np.concatenate([pos, q, vel, w], axis=1)


def _step_batch(y, P, scene, dt):
    k1 = _deriv(y, P, scene)
    k2 = _deriv(y + 0.5 * dt * k1, P, scene)
    return _project(y + dt * k2, P, scene)


def step_rigid_rk2(state: RigidState, props: RigidProps, scene: RigidScene, dt, step=0) -> RigidState:
    """One explicit midpoint step with constraint projection and quaternion renormalization."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    y = _step_batch(state.vector()[None], props.vector()[None], scene, dt)[0]
    if not np.all(np.isfinite(y)):
        raise NonFiniteRigidState(step)
    return RigidState.from_vector(y)


def step_jacobians(y, props_vec, scene, dt, h=1e-30):
    """Complex-step Jacobians (d y'/d y, d y'/d props) of one step."""
    n = STATE_SIZE + PROP_SIZE
    Y = np.tile(np.asarray(y, dtype=complex), (n, 1))
    P = np.tile(np.asarray(props_vec, dtype=complex), (n, 1))
    Y[np.arange(STATE_SIZE), np.arange(STATE_SIZE)] += 1j * h
    P[STATE_SIZE + np.arange(PROP_SIZE), np.arange(PROP_SIZE)] += 1j * h
    out = _step_batch(Y, P, scene, dt).imag / h
    return out[:STATE_SIZE].T, out[STATE_SIZE:].T


def constrained_initial_state(props: RigidProps, scene: RigidScene, orientation=(1, 0, 0, 0),
                              omega=(0.0, 0.0, 0.0), velocity=(0.0, 0.0, 0.0), position=None) -> RigidState:
    """Initial state consistent with the scene constraint (position and velocity projected)."""
    q = np.asarray(orientation, dtype=float)
    pos = props.com.copy() if position is None else np.asarray(position, dtype=float)
    y = np.concatenate([pos, q, velocity, omega])
    return RigidState.from_vector(_project(y[None], props.vector()[None], scene)[0])


def initial_state_jacobian(props: RigidProps, scene, orientation=(1, 0, 0, 0), omega=(0.0, 0.0, 0.0), h=1e-30):
    """d y0 / d props for ``constrained_initial_state`` (position tied to c when unconstrained)."""
    P = np.tile(props.vector().astype(complex), (PROP_SIZE, 1))
    P[np.arange(PROP_SIZE), np.arange(PROP_SIZE)] += 1j * h
    q = np.asarray(orientation, dtype=complex)
    Y = np.concatenate([P[:, 1:4], np.tile(q, (PROP_SIZE, 1)), np.zeros((PROP_SIZE, 3)),
                        np.tile(np.asarray(omega, dtype=complex), (PROP_SIZE, 1))], axis=1)
    return (_project(Y, P, scene).imag / h).T


# ---------------------------------------------------------------------------
# statics

def equilibrium_pose(props: RigidProps, scene: RigidScene) -> np.ndarray:
    """Orientation (quaternion) hanging the center of mass directly below the anchor.

    Uses the minimal rotation taking the attach-to-center offset onto the
    gravity direction; when both are already aligned the identity is returned,
    when they are opposite the rotation is half a turn about the axis closest
    to world x orthogonal to gravity.
    """
    g = scene.gravity
    gn = np.linalg.norm(g)
    if gn == 0:
        raise RigidSimError("no equilibrium defined")
    con = scene.constraint
    if con is None:
        raise RigidSimError("equilibrium pose needs a pin or pivot constraint")
    u = props.com - con.attach
    un = np.linalg.norm(u)
    if un < 1e-15:
        raise RigidSimError("center of mass coincides with the attach point")
    a, b = u / un, g / gn
    cos = float(np.clip(a @ b, -1.0, 1.0))
    axis = np.cross(a, b)
    sin = np.linalg.norm(axis)
    if sin < 1e-14:
        if cos > 0:
            return np.array([1.0, 0.0, 0.0, 0.0])
        ref = np.eye(3)[int(np.argmin(np.abs(b)))]
        perp = ref - (ref @ b) * b
        return axis_angle_quat(perp, np.pi)
    return axis_angle_quat(axis / sin, np.arctan2(sin, cos))


def gravity_torque(props: RigidProps, scene: RigidScene, orientation) -> np.ndarray:
    R = quat_to_matrix(np.asarray(orientation, dtype=float))
    arm = R @ (props.com - scene.constraint.attach)
    return np.cross(arm, props.mass * scene.gravity)


# ---------------------------------------------------------------------------
# trajectories

def tilt_angle(position, scene: RigidScene):
    """Signed angle of (c - pivot) from the gravity direction, about the pivot axis."""
    con = scene.constraint
    e1 = scene.gravity / np.linalg.norm(scene.gravity)
    e2 = np.cross(con.axis, e1)
    u = np.asarray(position) - con.point
    return np.arctan2(u @ e2, u @ e1)


@dataclass
class RigidTrajectory:
    times: np.ndarray
    states: np.ndarray          # (steps + 1, 13)
    tilt: np.ndarray | None = None

    @property
    def positions(self):
        return self.states[:, 0:3]

    @property
    def orientations(self):
        return self.states[:, 3:7]

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("t,x,y,z,qw,qx,qy,qz,tilt_angle\n")
            for k, (t, y) in enumerate(zip(self.times, self.states)):
                tilt = "" if self.tilt is None else repr(float(self.tilt[k]))
                vals = ",".join(repr(float(v)) for v in y[:7])
                fh.write(f"{float(t)!r},{vals},{tilt}\n")


def simulate_rigid(initial: RigidState, props: RigidProps, scene: RigidScene, dt, steps) -> RigidTrajectory:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    P = props.vector()[None]
    y = initial.vector()[None]
    out = [y[0]]
    for k in range(steps):
        y = _step_batch(y, P, scene, dt)
        if not np.all(np.isfinite(y)):
            raise NonFiniteRigidState(k)
        out.append(y[0])
    states = np.array(out)
    tilt = None
    if isinstance(scene.constraint, PivotAxis):
        tilt = tilt_angle(states[:, 0:3], scene)
    return RigidTrajectory(dt * np.arange(steps + 1), states, tilt)


def tilt_cotangent(states, scene, tilt_bar):
    """State cotangents (steps + 1, 13) from per-step tilt-angle cotangents."""
    con = scene.constraint
    e1 = scene.gravity / np.linalg.norm(scene.gravity)
    e2 = np.cross(con.axis, e1)
    u = states[:, 0:3] - con.point
    a, b = u @ e1, u @ e2
    coef = np.asarray(tilt_bar) / (a * a + b * b)
    out = np.zeros_like(states)
    out[:, 0:3] = coef[:, None] * (a[:, None] * e2 - b[:, None] * e1)
    return out


def kinetic_energy(state: RigidState, props: RigidProps):
    w = state.omega
    return 0.5 * props.mass * state.velocity @ state.velocity + 0.5 * w @ props.inertia @ w


def potential_energy(state: RigidState, props: RigidProps, scene: RigidScene):
    return -props.mass * scene.gravity @ state.position


def angular_momentum_world(state: RigidState, props: RigidProps):
    R = quat_to_matrix(state.orientation)
    return R @ (props.inertia @ state.omega)
