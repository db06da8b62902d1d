"""Time integration of particle bodies: leapfrog and implicit Euler on the incremental potential.

The generic steppers work on (n, 3) position arrays with any force or energy
provider, so they can be exercised on single-spring problems. ``SoftSystem``
wires them to the corotated SPH body and also provides the reverse-mode
products of each step used by the adjoint sweep.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .mechanics import (Ground, InvertedElementError, SoftBody, SoftMaterial, SoftPotential, SoftSimError,
                        extract_rotation, polar_vjp)

log = logging.getLogger(__name__)


class NonFiniteStateError(SoftSimError):
    def __init__(self, step):
        super().__init__(f"non-finite state at step {step}")
        self.step = step


def _check_finite(x, v, step):
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise NonFiniteStateError(step)


def _free_mask(n, pinned):
    free = np.ones(n, dtype=bool)
    if pinned is not None and len(pinned):
        free[np.asarray(pinned)] = False
    return free


def step_leapfrog(x, v, force, masses, dt, pinned=None, f0=None):
    """Kick-drift-kick. Returns (x', v', f') so the end force can be reused.

    ``force(x)`` returns total (n, 3) forces; pinned particles stay put with
    zero velocity.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    free = _free_mask(len(x), pinned)[:, None]
    m = np.asarray(masses, dtype=float)[:, None]
    f = force(x) if f0 is None else f0
    v_half = free * (v + f / m * (0.5 * dt))
    x_new = x + v_half * dt
    f_new = force(x_new)
    v_new = free * (v_half + f_new / m * (0.5 * dt))
    return x_new, v_new, f_new


@dataclass
class ImplicitStepInfo:
    iterations: int
    residual: float
    tolerance: float
    converged: bool
    potential_start: float
    potential_end: float


def _solve(H, rhs):
    """Direct solve; a singular system yields NaNs instead of raising."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", spla.MatrixRankWarning)
            if sparse.issparse(H):
                return spla.spsolve(H.tocsc(), rhs)
            return np.linalg.solve(H, rhs)
    except (np.linalg.LinAlgError, RuntimeError):
        return np.full_like(rhs, np.nan)


def _restrict(H, idx):
    if sparse.issparse(H):
        H = H.tocsr()
        return H[idx][:, idx]
    return H[np.ix_(idx, idx)]


def step_implicit(x, v, masses, dt, energy, hessian, accel=(0.0, 0.0, 0.0), pinned=None,
                  tol=None, max_iter=50, step=0, fallback_hessian=None):
    """One implicit Euler step: x' = argmin E(x) + |x - y|_M^2 / (2 dt^2).

    ``energy(x)`` returns (E, grad) and ``hessian(x)`` a (3n, 3n) matrix
    (dense or sparse). When the Newton direction from it is unusable or not
    a descent direction, ``fallback_hessian`` (typically a positive
    semidefinite projection) is tried, then the negative gradient. Steps are
    accepted by Armijo backtracking. Returns (x', v', info).

    At least one Newton step is taken unless the predictor's residual is
    exactly zero. Accepting the predictor on tolerance alone lets motion
    smaller than the tolerance drift and grow.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = len(x)
    m = np.asarray(masses, dtype=float)
    free = _free_mask(n, pinned)
    M = np.repeat(m, 3)
    freedof = np.repeat(free, 3)
    idx = np.flatnonzero(freedof)
    y = x + dt * v + dt * dt * np.asarray(accel, dtype=float)
    y[~free] = x[~free]
    if tol is None:
        tol = 1e-6 * float(m.max()) * max(float(np.linalg.norm(accel)), 1.0)

    def potential(z):
        try:
            e, g = energy(z)
        except InvertedElementError:
            return np.inf, None
        d = (z - y).ravel()
        return e + 0.5 * np.sum(M * d * d) / dt ** 2, g.ravel() + M * d / dt ** 2

    xk = y.copy()
    phi, grad = potential(xk)
    if not np.isfinite(phi):
        xk = x.copy()
        phi, grad = potential(xk)
        if not np.isfinite(phi):
            raise InvertedElementError(-1)
    phi0 = phi
    best = (np.max(np.abs(grad[idx])) if len(idx) else 0.0, xk, phi)
    it = 0
    while (best[0] > tol or (it == 0 and best[0] > 0)) and it < max_iter:
        it += 1
        gf = grad[idx]
        d = None
        for hess in (hessian, fallback_hessian):
            if hess is None:
                continue
            H = hess(xk)
            Hd = sparse.diags(M / dt ** 2) if sparse.issparse(H) else np.diag(M / dt ** 2)
            d = -_solve(_restrict(H + Hd, idx), gf)
            if np.all(np.isfinite(d)) and d @ gf < 0:
                break
            d = None
        if d is None:
            d = -gf / (M[idx] / dt ** 2)
        slope = d @ gf
        alpha = 1.0
        accepted = False
        for _ in range(40):
            trial = xk.copy().ravel()
            trial[idx] += alpha * d
            trial = trial.reshape(n, 3)
            phi_t, grad_t = potential(trial)
            if np.isfinite(phi_t) and phi_t <= phi + 1e-4 * alpha * slope:
                accepted = True
                break
            # accept tiny-gain steps that still shrink the residual (round-off regime)
            if np.isfinite(phi_t) and phi_t - phi <= 1e-12 * abs(phi) and \
                    np.max(np.abs(grad_t[idx])) < best[0]:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        xk, phi, grad = trial, phi_t, grad_t
        res = np.max(np.abs(grad[idx])) if len(idx) else 0.0
        if res < best[0]:
            best = (res, xk, phi)
    res, xk, phi = best
    converged = res <= tol
    if not converged:
        log.warning("implicit step %d: residual %.3e above tolerance %.3e after %d iterations",
                    step, res, tol, it)
    v_new = (xk - x) / dt
    _check_finite(xk, v_new, step)
    return xk, v_new, ImplicitStepInfo(it, float(res), float(tol), bool(converged), float(phi0), float(phi))


# ---------------------------------------------------------------------------
# soft scenes

@dataclass
class PressureRamp:
    """p(step) = peak * min(step / ramp_steps, 1); constant when ramp_steps is 0."""

    peak: float = 0.0
    ramp_steps: int = 0

    def __call__(self, step):
        if self.ramp_steps <= 0:
            return self.peak
        return self.peak * min(step / self.ramp_steps, 1.0)


@dataclass
class SoftScene:
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    ground: Ground | None = None
    pressure: PressureRamp = field(default_factory=PressureRamp)
    pinned: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float)
        self.pinned = np.asarray(self.pinned, dtype=int)


@dataclass
class SoftState:
    x: np.ndarray
    v: np.ndarray
    R: np.ndarray
    step: int = 0

    def copy(self):
        return SoftState(self.x.copy(), self.v.copy(), self.R.copy(), self.step)


@dataclass
class MaterialCotangent:
    mu: np.ndarray
    lam: np.ndarray
    chamber: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), np.zeros(n))

    def add(self, parts, sign=1.0):
        mu, lam, ch = parts
        self.mu += sign * mu
        self.lam += sign * lam
        if ch is not None:
            self.chamber += sign * ch


class SoftSystem:
    """Body + material + scene, with forward steps and their reverse-mode products."""

    def __init__(self, body: SoftBody, material: SoftMaterial, scene: SoftScene, strain_kind="green"):
        self.body = body
        self.material = material
        self.scene = scene
        self.kind = strain_kind
        self.free = _free_mask(body.n, scene.pinned)

    def potential(self, step):
        return SoftPotential(self.body, self.material, self.kind, self.scene.ground,
                             self.scene.pressure(step))

    def initial_state(self, x=None, v=None):
        x = self.body.X.copy() if x is None else np.array(x, dtype=float)
        v = np.zeros_like(x) if v is None else np.array(v, dtype=float)
        R = extract_rotation(self.body, x).R
        return SoftState(x, v, R, 0)

    def forces(self, x, R_prev, step):
        rot = extract_rotation(self.body, x, R_prev)
        report, grad = self.potential(step).evaluate(x, rot.R)
        f = -grad + self.body.masses[:, None] * self.scene.gravity
        return f, rot, report

    # -- forward ------------------------------------------------------------------------
    def step_leapfrog(self, state: SoftState, dt):
        k = state.step
        cache = {}

        def force(x):
            R_prev = cache.get("R", state.R)
            step = k if "R" not in cache else k + 1
            f, rot, _ = self.forces(x, R_prev, step)
            cache["R"] = rot.R
            return f

        x, v, _ = step_leapfrog(state.x, state.v, force, self.body.masses, dt, self.scene.pinned)
        _check_finite(x, v, k)
        return SoftState(x, v, cache["R"], k + 1), None

    def step_implicit(self, state: SoftState, dt, tol=None, max_iter=50):
        k = state.step
        rot = extract_rotation(self.body, state.x, state.R)
        pot = self.potential(k + 1)
        B = pot.stencil_matrix(rot.R)
        x, v, info = step_implicit(
            state.x, state.v, self.body.masses, dt,
            energy=lambda z: _energy(pot, z, rot.R),
            hessian=lambda z: pot.hessian(z, rot.R, B=B),
            fallback_hessian=lambda z: pot.hessian(z, rot.R, project=True, B=B),
            accel=self.scene.gravity, pinned=self.scene.pinned, tol=tol, max_iter=max_iter, step=k)
        R_new = extract_rotation(self.body, x, rot.R).R
        return SoftState(x, v, R_new, k + 1), info

    def step(self, state, dt, integrator):
        if integrator == "leapfrog":
            return self.step_leapfrog(state, dt)
        if integrator == "implicit":
            return self.step_implicit(state, dt)
        raise ValueError(f"unknown integrator {integrator!r}")

    # -- reverse ------------------------------------------------------------------------
    def _force_vjp(self, x, R_prev, step, u, mat_bar):
        """x cotangent of f(x) . u (rotations re-extracted at x); accumulates material cotangents."""
        rot = extract_rotation(self.body, x, R_prev)
        pot = self.potential(step)
        xb = -pot.hvp(x, rot.R, u)
        xb -= self.body.moment_vjp(polar_vjp(rot, pot.rotation_vjp(x, rot.R, u)))
        mat_bar.add(pot.param_vjp(x, rot.R, u), -1.0)
        return xb, rot.R

    def leapfrog_vjp(self, state: SoftState, dt, x_bar, v_bar, mat_bar):
        """Cotangents of (x_k, v_k) given those of (x_{k+1}, v_{k+1})."""
        k = state.step
        m = self.body.masses[:, None]
        free = self.free[:, None]
        # forward replay of the intermediate quantities
        f0, rot0, _ = self.forces(state.x, state.R, k)
        v_half = free * (state.v + f0 / m * (0.5 * dt))
        x1 = state.x + v_half * dt
        # v1 = free * (v_half + f(x1)/m dt/2)
        vb = free * v_bar
        fb1 = vb * (0.5 * dt) / m
        xb1 = x_bar.copy()
        xb_f, _ = self._force_vjp(x1, rot0.R, k + 1, fb1, mat_bar)
        xb1 += xb_f
        vb_half = vb + xb1 * dt
        vb_half = free * vb_half
        fb0 = vb_half * (0.5 * dt) / m
        xb0 = xb1.copy()
        xb_f0, _ = self._force_vjp(state.x, state.R, k, fb0, mat_bar)
        xb0 += xb_f0
        return xb0, vb_half

    def implicit_vjp(self, state: SoftState, next_state: SoftState, dt, x_bar, v_bar, mat_bar):
        k = state.step
        x0, x1 = state.x, next_state.x
        rot = extract_rotation(self.body, x0, state.R)
        pot = self.potential(k + 1)
        xb1 = x_bar + v_bar / dt
        xb0 = -v_bar / dt
        free3 = np.repeat(self.free, 3)
        idx = np.flatnonzero(free3)
        M = np.repeat(self.body.masses, 3)
        H = pot.hessian(x1, rot.R, project=False) + sparse.diags(M / dt ** 2)
        z = np.zeros(3 * self.body.n)
        if len(idx):
            z[idx] = spla.spsolve(_restrict(H, idx).tocsc(), xb1.ravel()[idx])
        if not np.all(np.isfinite(z)):
            raise SoftSimError(f"non-finite adjoint solve at step {k}")
        z = z.reshape(-1, 3)
        xb0 = xb0 + self.body.masses[:, None] * z / dt ** 2
        xb0 -= self.body.moment_vjp(polar_vjp(rot, pot.rotation_vjp(x1, rot.R, z)))
        pinned = ~self.free
        if np.any(pinned):
            Hz = pot.hvp(x1, rot.R, z)
            xb0[pinned] += xb1[pinned] - Hz[pinned]
        vb0 = self.free[:, None] * self.body.masses[:, None] * z / dt
        mat_bar.add(pot.param_vjp(x1, rot.R, z), -1.0)
        return xb0, vb0


def _energy(pot, z, R):
    report, grad = pot.evaluate(z, R)
    return report.total, grad


# ---------------------------------------------------------------------------
# trajectories

@dataclass
class SoftTrajectory:
    times: np.ndarray
    tracked: np.ndarray
    positions: np.ndarray          # (steps + 1, len(tracked), 3)
    final: SoftState
    infos: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("t,particle_id,x,y,z\n")
            for t, frame in zip(self.times, self.positions):
                for pid, p in zip(self.tracked, frame):
                    fh.write(f"{float(t)!r},{int(pid)},{float(p[0])!r},{float(p[1])!r},{float(p[2])!r}\n")


def simulate_soft(system: SoftSystem, initial: SoftState, dt, steps, integrator="leapfrog", tracked=None,
                  checkpoint_every=None, checkpoints=None):
    """Run ``steps`` steps; records tracked particle positions at every step.

    When ``checkpoints`` (a dict) is given, full states are stored every
    ``checkpoint_every`` steps for the reverse sweep.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if integrator not in ("leapfrog", "implicit"):
        raise ValueError(f"unknown integrator {integrator!r}")
    tracked = np.arange(system.body.n) if tracked is None else np.asarray(tracked, dtype=int)
    state = initial.copy()
    frames = [state.x[tracked].copy()]
    infos = []
    if checkpoints is not None:
        checkpoints[0] = state.copy()
    for k in range(steps):
        state, info = system.step(state, dt, integrator)
        frames.append(state.x[tracked].copy())
        if info is not None:
            infos.append(info)
        if checkpoints is not None and checkpoint_every and (k + 1) % checkpoint_every == 0:
            checkpoints[k + 1] = state.copy()
    times = dt * np.arange(steps + 1)
    return SoftTrajectory(times, tracked, np.array(frames), state, infos)
