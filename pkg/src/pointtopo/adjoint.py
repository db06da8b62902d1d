"""Reverse-mode gradients through the simulators, plus a finite-difference checker.

The dynamic gradients are discrete adjoints of the integrators as
implemented: a checkpointed forward pass (``Tape``) followed by a reverse
sweep that replays one segment at a time and applies per-step transposed
Jacobian products supplied by the simulator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rigidsim


class DeterminismError(RuntimeError):
    def __init__(self, step):
        super().__init__(f"replay of step {step} does not reproduce the recorded state")
        self.step = step


def _states_equal(a, b):
    if isinstance(a, np.ndarray):
        return np.array_equal(a, b)
    return all(np.array_equal(getattr(a, k), getattr(b, k)) for k in ("x", "v", "R"))


def _copy(state):
    return state.copy()


@dataclass
class Tape:
    """Forward trajectory stored as checkpoints every ``every`` steps.

    ``step_fn(state, k)`` returns the state after step k. Replaying a segment
    from its checkpoint must reproduce the next checkpoint bit for bit.
    """

    step_fn: Callable
    every: int = 25
    checkpoints: dict = field(default_factory=dict)
    steps: int = 0

    def forward(self, state0, steps, observe=None):
        if self.every < 1:
            raise ValueError("checkpoint interval must be >= 1")
        state = _copy(state0)
        self.checkpoints = {0: _copy(state)}
        self.steps = steps
        if observe is not None:
            observe(0, state)
        for k in range(steps):
            state = self.step_fn(state, k)
            if (k + 1) % self.every == 0 or k + 1 == steps:
                self.checkpoints[k + 1] = _copy(state)
            if observe is not None:
                observe(k + 1, state)
        return state

    def segments(self):
        starts = list(range(0, self.steps, self.every))
        return [(a, min(a + self.every, self.steps)) for a in reversed(starts)]

    def replay(self, start, end):
        state = _copy(self.checkpoints[start])
        out = [state]
        for k in range(start, end):
            state = self.step_fn(state, k)
            out.append(state)
        if end in self.checkpoints and not _states_equal(out[-1], self.checkpoints[end]):
            raise DeterminismError(end - 1)
        return out

    def reverse(self, vjp_step, final_bar, observation_bar=None):
        """Sweep backwards. ``vjp_step(k, state_k, state_k1, bar_k1)`` returns bar_k.

        ``observation_bar(k, state_k)`` adds a direct loss cotangent on state k
        and may return None.
        """
        bar = final_bar
        if observation_bar is not None:
            extra = observation_bar(self.steps, self.checkpoints[self.steps])
            if extra is not None:
                bar = _add(bar, extra)
        for a, b in self.segments():
            states = self.replay(a, b)
            for k in range(b - 1, a - 1, -1):
                bar = vjp_step(k, states[k - a], states[k - a + 1], bar)
                _check_cotangent(bar, k)
                if observation_bar is not None:
                    extra = observation_bar(k, states[k - a])
                    if extra is not None:
                        bar = _add(bar, extra)
        return bar


def _add(a, b):
    if isinstance(a, tuple):
        return tuple(x + y for x, y in zip(a, b))
    return a + b


def _check_cotangent(bar, k):
    parts = bar if isinstance(bar, tuple) else (bar,)
    if not all(np.all(np.isfinite(p)) for p in parts):
        raise FloatingPointError(f"non-finite cotangent at step {k}")


# ---------------------------------------------------------------------------
# static rigid gradients

def grad_static(cloud, topology, density, loss_fn, pin_boundary=False):
    """Loss and parameter gradient for losses of the rigid properties alone.

    ``loss_fn(props)`` returns (value, cotangent 10-vector over (m, c, I)).
    """
    ind = topology.indicator(cloud, pin_boundary)
    props = rigidsim.rigid_props(cloud, ind.r, density)
    value, prop_bar = loss_fn(props)
    r_bar = rigidsim.rigid_props_vjp(cloud, ind.r, density, props, prop_bar)
    return float(value), ind.vjp(r_bar)


# ---------------------------------------------------------------------------
# dynamic rigid gradients

@dataclass
class RigidRun:
    props: rigidsim.RigidProps
    trajectory: rigidsim.RigidTrajectory
    tape: Tape


def rigid_forward(props, scene, dt, steps, orientation=(1, 0, 0, 0), omega=(0, 0, 0), every=25):
    P = props.vector()[None]

    def step_fn(y, k):
        y1 = rigidsim._step_batch(y[None], P, scene, dt)[0]
        if not np.all(np.isfinite(y1)):
            raise rigidsim.NonFiniteRigidState(k)
        return y1

    y0 = rigidsim.constrained_initial_state(props, scene, orientation, omega).vector()
    tape = Tape(step_fn, every)
    frames = []
    tape.forward(y0, steps, observe=lambda k, y: frames.append(y.copy()))
    states = np.array(frames)
    tilt = rigidsim.tilt_angle(states[:, 0:3], scene) if isinstance(scene.constraint, rigidsim.PivotAxis) else None
    return RigidRun(props, rigidsim.RigidTrajectory(dt * np.arange(steps + 1), states, tilt), tape)


def rigid_reverse(run: RigidRun, scene, dt, state_bar, orientation=(1, 0, 0, 0), omega=(0, 0, 0)):
    """Props cotangent (10-vector) from per-step state cotangents (steps + 1, 13)."""
    P = run.props.vector()
    p_bar = np.zeros(rigidsim.PROP_SIZE)

    def vjp_step(k, y, y1, bar):
        Jy, Jp = rigidsim.step_jacobians(y, P, scene, dt)
        p_bar[:] += Jp.T @ bar
        return Jy.T @ bar

    final = state_bar[-1].copy()
    y_bar0 = run.tape.reverse(vjp_step, final,
                              lambda k, y: state_bar[k] if k < run.tape.steps else None)
    J0 = rigidsim.initial_state_jacobian(run.props, scene, orientation, omega)
    return p_bar + J0.T @ y_bar0


# ---------------------------------------------------------------------------
# dynamic soft gradients

def soft_forward(system, initial, dt, steps, integrator="leapfrog", every=25, observe=None):
    infos = []

    def step_fn(state, k):
        new, info = system.step(state, dt, integrator)
        if info is not None:
            infos.append(info)
        return new

    tape = Tape(step_fn, every)
    final = tape.forward(initial, steps, observe)
    n_forward = len(infos)
    return tape, final, infos[:n_forward]


def soft_reverse(system, tape, dt, integrator, x_bar_final, v_bar_final, x_bar_at=None):
    """Material cotangents from final-state cotangents and optional per-step position cotangents."""
    from .softsim import MaterialCotangent

    mat_bar = MaterialCotangent.zeros(system.body.n)

    def vjp_step(k, s0, s1, bar):
        xb, vb = bar
        if integrator == "leapfrog":
            return system.leapfrog_vjp(s0, dt, xb, vb, mat_bar)
        return system.implicit_vjp(s0, s1, dt, xb, vb, mat_bar)

    obs = None
    if x_bar_at is not None:
        def obs(k, state):
            xb = x_bar_at(k)
            return None if xb is None else (xb, np.zeros_like(xb))
    tape.reverse(vjp_step, (x_bar_final.copy(), v_bar_final.copy()), obs)
    return mat_bar


# ---------------------------------------------------------------------------
# finite-difference verification

def rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-12)


@dataclass
class GradReport:
    gradient: np.ndarray
    rows: list
    tolerance: float
    max_rel_err: float

    @property
    def passed(self):
        return self.max_rel_err <= self.tolerance

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("index,analytic,numeric,rel_err,step\n")
            for idx, a, n, e, h in self.rows:
                fh.write(f"{int(idx)},{float(a)!r},{float(n)!r},{float(e)!r},{float(h)!r}\n")

    def summary(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (f"gradcheck {verdict}: {len(self.rows)} parameters, max rel err "
                f"{self.max_rel_err:.3e} (tolerance {self.tolerance:.1e})")


def gradcheck(fun, x, steps=(1e-4, 1e-5, 1e-6), tolerance=1e-6, indices=None, sample=None, seed=0,
              gradient=None):
    """Compare the analytic gradient of ``fun`` (x -> (loss, grad)) with central differences.

    Each checked parameter reports its best relative error over ``steps``.
    At most ``sample`` parameters are drawn (seeded) when no explicit
    ``indices`` are given.
    """
    x = np.asarray(x, dtype=float)
    if gradient is None:
        _, gradient = fun(x)
    gradient = np.asarray(gradient, dtype=float)
    if indices is None:
        indices = np.arange(len(x))
        if sample is not None and sample < len(x):
            indices = np.sort(np.random.default_rng(seed).choice(len(x), sample, replace=False))
    rows = []
    for idx in indices:
        best = None
        for h in steps:
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            num = (fun(xp)[0] - fun(xm)[0]) / (2 * h)
            e = rel_err(gradient[idx], num)
            if best is None or e < best[3]:
                best = (int(idx), float(gradient[idx]), float(num), float(e), float(h))
        rows.append(best)
    max_err = max((r[3] for r in rows), default=0.0)
    return GradReport(gradient, rows, tolerance, max_err)
