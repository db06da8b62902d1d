"""Builds clouds, tasks and initial topologies from a ``RunConfig``."""

from __future__ import annotations

import numpy as np

from . import geometry, objectives, rigidsim, scenes, tasks
from .config import REFERENCE_KINDS, ConfigError, RunConfig
from .softsim import Ground, MaterialBlend, PressureRamp, SoftScene


def load_cloud(cfg: RunConfig) -> geometry.ParticleCloud:
    g = cfg.geometry
    if g.grid is not None:
        shape = tuple(int(s) for s in g.grid.shape)
        return geometry.grid_cloud(shape, g.grid.spacing, g.grid.origin, g.grid.kernel_factor)
    surf = geometry.load_surface(cfg.resolve(g.surface))
    fill = geometry.FillConfig(g.voxel_size, g.jitter, cfg.seed, g.kernel_factor, g.remove_outliers)
    return geometry.fill_interior(surf, fill)


def load_features(cfg: RunConfig) -> objectives.MotionFeatures:
    feats = objectives.load_reference(cfg.resolve(cfg.reference))
    want = REFERENCE_KINDS[cfg.task]
    if feats.kind != want:
        raise ConfigError(f"task {cfg.task} needs '{want}' reference features, file holds '{feats.kind}'")
    return feats


def initial_topology(cfg: RunConfig, cloud):
    t = cfg.topology
    return scenes.initial_topology(t.kind, cloud, t.r0, t.beta, cfg.seed, tuple(t.hidden), t.init == "solid")


def _pinned(cfg, cloud):
    pin = cfg.scene.pin
    if pin is None:
        return np.zeros(0, dtype=int)
    a = "xyz".index(pin.axis)
    return np.flatnonzero(cloud.rest_positions[:, a] < pin.below)


def _blend(cfg):
    s = cfg.scene
    if cfg.task == "soft_actuated":
        return MaterialBlend.pneumatic(s.E_soft, s.nu)
    return MaterialBlend(s.E_soft, s.E_stiff, s.nu)


def soft_scene(cfg, cloud):
    s = cfg.scene
    ground = None
    if s.ground is not None:
        ground = Ground(s.ground.point, s.ground.normal, s.ground.stiffness, s.ground.clearance)
    return SoftScene(gravity=s.gravity, ground=ground, pressure=PressureRamp(s.pressure, s.ramp_steps),
                     pinned=_pinned(cfg, cloud))


def rigid_scene(cfg):
    s = cfg.scene
    return rigidsim.RigidScene(gravity=s.gravity, constraint=rigidsim.PivotAxis(s.pivot, s.axis))


def build_task(cfg: RunConfig, cloud, feats=None):
    feats = load_features(cfg) if feats is None else feats
    s = cfg.scene
    pin = cfg.topology.pin_boundary
    if cfg.task == "rigid_static":
        return tasks.StaticComTask(cloud, feats.target, s.density, pin)
    if cfg.task == "rigid_dynamic":
        return tasks.OscillationTask(cloud, rigid_scene(cfg), feats.period, feats.max_tilt,
                                     omega0=np.asarray(s.omega0, dtype=float), dt=s.dt, steps=s.steps,
                                     density=s.density, weights=tuple(s.weights), pin_boundary=pin,
                                     checkpoint_every=s.checkpoint_every)
    v0 = np.tile(np.asarray(s.initial_velocity, dtype=float), (len(cloud), 1))
    common = dict(dt=s.dt, steps=s.steps, density=s.density, blend=_blend(cfg), scene=soft_scene(cfg, cloud),
                  v0=v0, integrator=s.integrator, strain_kind=s.strain, pin_boundary=pin,
                  checkpoint_every=s.checkpoint_every)
    if cfg.task == "soft":
        for pid in feats.tracks:
            if not 0 <= pid < len(cloud):
                raise ConfigError(f"reference track id {pid} outside the cloud (0..{len(cloud) - 1})")
        return tasks.SoftTracksTask(cloud, feats.tracks, **common)
    m = s.markers
    base = tuple(scenes.nearest(cloud, p) for p in m.base)
    tip = tuple(scenes.nearest(cloud, p) for p in m.tip)
    return tasks.BendTask(cloud, feats.angle, base, tip, tuple(m.normal), **common)


def problem(cfg: RunConfig, task, topo):
    from .optimizer import BetaSchedule, OptProblem

    o = cfg.optimizer
    sched = None
    if o.beta_schedule is not None:
        sched = BetaSchedule(o.beta_schedule.every, o.beta_schedule.factor, o.beta_schedule.beta_max)
    # bounds apply to the point field only; SDF coefficients are unbounded
    bounded = cfg.topology.kind == "point"
    opts = {"lr": o.lr} if o.method == "adam" else {"memory": o.memory, "tolerance": o.tolerance}
    return OptProblem(topo.params(), task=task, topology=topo,
                      lower=o.lower if bounded else None, upper=o.upper if bounded else None,
                      max_iters=o.max_iters, max_evals=o.max_evals, beta_schedule=sched,
                      method=o.method, options=opts, seed=cfg.seed,
                      loss_scale=o.loss_scale)
