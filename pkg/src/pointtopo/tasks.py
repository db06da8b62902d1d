"""End-to-end differentiable scenes: topology -> simulation -> loss, with gradients.

Every task exposes ``value_and_grad(topology) -> (loss, d loss / d params)``
and ``evaluate(topology)`` for the forward pass with diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import adjoint, objectives, rigidsim
from .softsim import Ground, MaterialBlend, SoftBody, SoftScene, SoftSystem


@dataclass
class StaticComTask:
    """Hanging rigid body: drive the center of mass to ``target``."""

    cloud: object
    target: np.ndarray
    density: float = 1000.0
    pin_boundary: bool = True

    def evaluate(self, topology):
        ind = topology.indicator(self.cloud, self.pin_boundary)
        props = rigidsim.rigid_props(self.cloud, ind.r, self.density)
        value, _ = objectives.loss_com(props, self.target)
        return {"loss": value, "com": props.com, "mass": props.mass, "r": ind.r}

    def value_and_grad(self, topology):
        return adjoint.grad_static(self.cloud, topology, self.density,
                                   lambda p: objectives.loss_com(p, self.target), self.pin_boundary)


@dataclass
class OscillationTask:
    """Body rocking about a pivot axis; match oscillation period and maximal tilt."""

    cloud: object
    scene: rigidsim.RigidScene
    target_period: float
    target_tilt: float
    omega0: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    dt: float = 5e-3
    steps: int = 200
    density: float = 1000.0
    weights: tuple = (1.0, 1.0)
    pin_boundary: bool = True
    temperature: float = 1e-3
    checkpoint_every: int = 25

    def _forward(self, topology):
        ind = topology.indicator(self.cloud, self.pin_boundary)
        props = rigidsim.rigid_props(self.cloud, ind.r, self.density)
        run = adjoint.rigid_forward(props, self.scene, self.dt, self.steps, omega=self.omega0,
                                    every=self.checkpoint_every)
        return ind, props, run

    def evaluate(self, topology):
        ind, props, run = self._forward(topology)
        traj = run.trajectory
        value, _, osc = objectives.loss_oscillation(traj.times, traj.tilt, self.target_period,
                                                    self.target_tilt, self.weights, self.temperature)
        return {"loss": value, "period": osc.period, "frequency": osc.frequency,
                "max_tilt": osc.max_tilt_hard, "trajectory": traj, "r": ind.r, "props": props}

    def value_and_grad(self, topology):
        ind, props, run = self._forward(topology)
        traj = run.trajectory
        value, tilt_bar, _ = objectives.loss_oscillation(traj.times, traj.tilt, self.target_period,
                                                         self.target_tilt, self.weights, self.temperature)
        state_bar = rigidsim.tilt_cotangent(traj.states, self.scene, tilt_bar)
        p_bar = adjoint.rigid_reverse(run, self.scene, self.dt, state_bar, omega=self.omega0)
        r_bar = rigidsim.rigid_props_vjp(self.cloud, ind.r, self.density, props, p_bar)
        return value, ind.vjp(r_bar)


class _SoftTask:
    """Shared plumbing for soft scenes: one body with fixed rest masses."""

    def _setup(self):
        self.body = SoftBody(self.cloud, self.density * self.cloud.volumes, self.weighting)

    def _system(self, topology):
        ind = topology.indicator(self.cloud, self.pin_boundary)
        return ind, SoftSystem(self.body, self.blend(ind.r), self.scene, self.strain_kind)

    def _simulate(self, system, observe=None):
        initial = system.initial_state(self.x0, self.v0)
        tape, final, infos = adjoint.soft_forward(system, initial, self.dt, self.steps, self.integrator,
                                                  self.checkpoint_every, observe)
        return tape, final, infos

    def _grad(self, ind, system, tape, x_bar_final, v_bar_final, x_bar_at=None):
        mb = adjoint.soft_reverse(system, tape, self.dt, self.integrator, x_bar_final, v_bar_final, x_bar_at)
        return ind.vjp(self.blend.vjp(mb.mu, mb.lam, mb.chamber))


@dataclass
class SoftTracksTask(_SoftTask):
    """Soft body dropped on the ground; match the motion of tracked particles."""

    cloud: object
    reference: dict                    # id -> (times, (T, 3) points)
    dt: float = 5e-4
    steps: int = 50
    density: float = 1000.0
    blend: MaterialBlend = field(default_factory=MaterialBlend)
    scene: SoftScene = field(default_factory=lambda: SoftScene(ground=Ground([0, 0, 0], [0, 0, 1])))
    x0: np.ndarray | None = None
    v0: np.ndarray | None = None
    integrator: str = "leapfrog"
    strain_kind: str = "green"
    weighting: str = "density"
    pin_boundary: bool = False
    checkpoint_every: int = 25

    def __post_init__(self):
        self.tracked = np.array(sorted(int(k) for k in self.reference), dtype=int)
        self._setup()

    def _run(self, topology):
        ind, system = self._system(topology)
        frames = []
        tape, final, infos = self._simulate(system, lambda k, s: frames.append(s.x[self.tracked].copy()))
        times = self.dt * np.arange(self.steps + 1)
        return ind, system, tape, final, times, np.array(frames[:self.steps + 1])

    def evaluate(self, topology):
        ind, system, tape, final, times, pos = self._run(topology)
        value, _ = objectives.loss_pivot_tracks(times, self.tracked, pos, self.reference)
        return {"loss": value, "times": times, "positions": pos, "final": final, "r": ind.r}

    def value_and_grad(self, topology):
        ind, system, tape, final, times, pos = self._run(topology)
        value, bar = objectives.loss_pivot_tracks(times, self.tracked, pos, self.reference)
        n = self.body.n

        def x_bar_at(k):
            out = np.zeros((n, 3))
            out[self.tracked] = bar[k]
            return out

        x_final = x_bar_at(self.steps)
        return value, self._grad(ind, system, tape, x_final, np.zeros((n, 3)),
                                 lambda k: x_bar_at(k) if k < self.steps else None)


@dataclass
class BendTask(_SoftTask):
    """Pneumatic actuator: match the final bending angle between two marker segments."""

    cloud: object
    target_angle: float
    base: tuple
    tip: tuple
    normal: tuple = (0.0, 1.0, 0.0)
    dt: float = 0.02
    steps: int = 10
    density: float = 1000.0
    blend: MaterialBlend = field(default_factory=MaterialBlend.pneumatic)
    scene: SoftScene = field(default_factory=SoftScene)
    x0: np.ndarray | None = None
    v0: np.ndarray | None = None
    integrator: str = "implicit"
    strain_kind: str = "green"
    weighting: str = "density"
    pin_boundary: bool = True
    checkpoint_every: int = 25

    def __post_init__(self):
        self._setup()

    def evaluate(self, topology):
        ind, system = self._system(topology)
        tape, final, infos = self._simulate(system)
        value, _, angle = objectives.loss_bend_angle(final.x, self.base, self.tip, self.target_angle,
                                                     self.normal)
        return {"loss": value, "angle": angle, "final": final, "infos": infos, "r": ind.r}

    def value_and_grad(self, topology):
        ind, system = self._system(topology)
        tape, final, _ = self._simulate(system)
        value, x_bar, _ = objectives.loss_bend_angle(final.x, self.base, self.tip, self.target_angle,
                                                     self.normal)
        return value, self._grad(ind, system, tape, x_bar, np.zeros_like(x_bar))


@dataclass
class PoseSequenceTask:
    """Water-filled shell: preferred tilt and center height at several fill levels."""

    cloud: object
    model: objectives.PoseModel
    levels: np.ndarray
    weights: tuple = (1.0, 1.0)
    pin_boundary: bool = True

    def evaluate(self, topology):
        ind = topology.indicator(self.cloud, self.pin_boundary)
        value, _ = objectives.loss_pose_sequence(self.cloud, ind.r, self.model, self.levels, self.weights)
        poses = [objectives.pose_at_level(self.cloud, ind.r, self.model, k)[:2] for k in self.levels[:, 0]]
        return {"loss": value, "poses": poses, "r": ind.r}

    def value_and_grad(self, topology):
        ind = topology.indicator(self.cloud, self.pin_boundary)
        value, r_bar = objectives.loss_pose_sequence(self.cloud, ind.r, self.model, self.levels, self.weights)
        return value, ind.vjp(r_bar)
