"""Desk-scale scenes used by the examples, the tests and the acceptance suite.

Each builder returns a small record holding the particle cloud and what a
task needs. Reference features are produced from a known ground-truth
indicator so that every target is reachable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry, rigidsim, shapes, tasks, topology
from .softsim import Ground, MaterialBlend, PressureRamp, SoftScene


def fill_shape(name, voxel, kernel_factor=1.5, surface_spacing=None):
    sh = shapes.SHAPES[name]()
    surf = shapes.sample_surface(sh, voxel / 3 if surface_spacing is None else surface_spacing)
    return geometry.fill_interior(surf, geometry.FillConfig(voxel, kernel_factor=kernel_factor))


def pinned_indicator(cloud, r):
    r, _ = topology._pin(np.asarray(r, dtype=float), cloud, True)
    return r


def com_of(cloud, r, density=1000.0):
    return rigidsim.rigid_props(cloud, r, density).com


def nearest(cloud, point):
    return int(np.argmin(np.linalg.norm(cloud.rest_positions - np.asarray(point, dtype=float), axis=1)))


def frame(cloud):
    """Center and half extent, used to normalize SDF inputs."""
    X = cloud.rest_positions
    lo, hi = X.min(0), X.max(0)
    return 0.5 * (lo + hi), 0.5 * float(np.max(hi - lo))


# ---------------------------------------------------------------------------
# rigid statics

@dataclass
class StaticScene:
    cloud: geometry.ParticleCloud
    target: np.ndarray
    gt_r: np.ndarray

    def task(self, density=1000.0, pin_boundary=True):
        return tasks.StaticComTask(self.cloud, self.target, density, pin_boundary)


def seesaw(d=0.5):
    """Two unit particles at (-d, 0, 0) and (d, 0, 0); target the left one."""
    X = np.array([[-d, 0.0, 0.0], [d, 0.0, 0.0]])
    cloud = geometry.build_neighbors(geometry.ParticleCloud(X, np.ones(2), np.zeros(2, bool), 1.0))
    return StaticScene(cloud, X[0].copy(), np.array([1.0, 0.0]))


def hanging(name, voxel=None):
    """Hollow the +x half of a shipped solid; the target is the resulting center of mass."""
    voxel = {"egg": 0.03, "swim_ring": 0.025, "boomerang": 0.03, "hawk": 0.0045}.get(name, 0.03) \
        if voxel is None else voxel
    cloud = fill_shape(name, voxel)
    gt = hanging_truth(cloud)
    return StaticScene(cloud, com_of(cloud, gt), gt)


def hanging_truth(cloud):
    X = cloud.rest_positions
    ctr, _ = frame(cloud)
    return pinned_indicator(cloud, np.where(X[:, 0] < ctr[0], 1.0, 1e-3))


def hawk(voxel=0.0045):
    """Balancing bird; the ground truth carves a tilted, off-center ellipsoidal cavity.

    The cavity breaks the left-right symmetry so that no quadric coefficient
    has an identically zero gradient at the symmetric solid start.
    """
    cloud = fill_shape("hawk", voxel)
    gt = hawk_truth(cloud)
    return StaticScene(cloud, com_of(cloud, gt), gt)


def hawk_truth(cloud):
    ctr, scale = frame(cloud)
    A = np.array([[4.0, 1.0, 0.0], [1.0, 1.0, 0.5], [0.0, 0.5, 9.0]])
    cavity = topology.QuadricSDF(A, np.array([0.6, 0.4, 0.0]), -0.3, 10.0, ctr, scale)
    return pinned_indicator(cloud, 1.0 - cavity.r_at(cloud.rest_positions))


def initial_topology(kind, cloud, r0=0.95, beta=10.0, seed=0, hidden=(32, 32), solid=True):
    """Fully solid (r = r0) start for each representation, or the default guesses when ``solid`` is False."""
    ctr, scale = frame(cloud)
    if kind == "point":
        return topology.PointField.uniform(len(cloud), r0 if solid else 0.5, beta)
    if kind == "quadric":
        if solid:
            return topology.QuadricSDF.solid(r0, beta, ctr, scale)
        # centered sphere holding half of the particles
        radius = float(np.median(np.linalg.norm(cloud.rest_positions - ctr, axis=1)))
        return topology.QuadricSDF.sphere(ctr, radius, beta, ctr, scale)
    if kind == "neural":
        bias = -np.log(r0 / (1 - r0)) / beta if solid else 0.0
        return topology.NeuralSDF.create(tuple(hidden), seed=seed, beta=beta, init_scale=1e-3 if solid else 1.0,
                                         output_bias=bias, center=ctr, scale=scale)
    raise ValueError(f"unknown topology kind {kind!r}")


# ---------------------------------------------------------------------------
# wobbly doll

@dataclass
class DollScene:
    cloud: geometry.ParticleCloud
    scene: rigidsim.RigidScene
    gt_r: np.ndarray
    omega0: np.ndarray
    dt: float
    steps: int

    def task(self, target_period, target_tilt, **kw):
        return tasks.OscillationTask(self.cloud, self.scene, target_period, target_tilt,
                                     omega0=self.omega0, dt=self.dt, steps=self.steps, **kw)

    def features(self, r):
        """Period and smooth max tilt of the design ``r``."""
        from .objectives import extract_oscillation
        props = rigidsim.rigid_props(self.cloud, r, 1000.0)
        y0 = rigidsim.constrained_initial_state(props, self.scene, omega=self.omega0)
        traj = rigidsim.simulate_rigid(y0, props, self.scene, self.dt, self.steps)
        osc = extract_oscillation(traj.times, traj.tilt)
        return osc.period, osc.max_tilt


def doll(voxel=0.004, cut=-0.01, steps=500, dt=5e-3, kick=1.5):
    """Doll rocking about the center of curvature of its base.

    The ground truth keeps material only below ``z = cut`` (plus the pinned
    shell), which lowers the center of mass and speeds the rocking up.
    """
    cloud = fill_shape("wobbly_doll", voxel, surface_spacing=0.0015)
    scene = rigidsim.RigidScene(constraint=rigidsim.PivotAxis([0.0, 0.0, 0.0], [0.0, 1.0, 0.0]))
    return DollScene(cloud, scene, doll_truth(cloud, cut), np.array([0.0, kick, 0.0]), dt, steps)


def doll_truth(cloud, cut=-0.01):
    return pinned_indicator(cloud, np.where(cloud.rest_positions[:, 2] < cut, 1.0, 1e-3))


# ---------------------------------------------------------------------------
# pneumatic finger

@dataclass
class FingerScene:
    cloud: geometry.ParticleCloud
    scene: SoftScene
    base: tuple
    tip: tuple
    gt_r: np.ndarray

    def task(self, target_angle, **kw):
        return tasks.BendTask(self.cloud, target_angle, self.base, self.tip, scene=self.scene, **kw)


def finger(voxel=0.004, kernel_factor=1.0, pressure=-2e4, ramp_steps=10):
    """Cantilever clamped at x = 0; the ground-truth chamber is the interior below the mid-plane."""
    cloud = fill_shape("finger", voxel, kernel_factor)
    X = cloud.rest_positions
    root = np.flatnonzero(X[:, 0] < X[:, 0].min() + 0.5 * voxel)
    x0, x1 = X[:, 0].min(), X[:, 0].max()
    base = (nearest(cloud, [x0, 0, 0]), nearest(cloud, [x0 + 2 * voxel, 0, 0]))
    tip = (nearest(cloud, [x1 - 2 * voxel, 0, 0]), nearest(cloud, [x1, 0, 0]))
    scene = SoftScene(gravity=(0.0, 0.0, 0.0), pressure=PressureRamp(pressure, ramp_steps), pinned=root)
    return FingerScene(cloud, scene, base, tip, finger_truth(cloud))


def finger_truth(cloud):
    """Chamber = interior particles below the mid-plane."""
    return np.where(~cloud.boundary_flags & (cloud.rest_positions[:, 2] < 0), 1e-3, 1.0)


# ---------------------------------------------------------------------------
# small soft scenes for gradient checks

@dataclass
class CubeScene:
    cloud: geometry.ParticleCloud
    scene: SoftScene
    blend: MaterialBlend
    integrator: str
    dt: float
    steps: int
    tracked: np.ndarray
    gt_r: np.ndarray
    v0: np.ndarray | None = None

    def reference(self, r):
        """Tracks of ``self.tracked`` under the design ``r``."""
        t = tasks.SoftTracksTask(self.cloud, {int(i): (np.array([0.0, 1.0]), np.zeros((2, 3)))
                                              for i in self.tracked},
                                 dt=self.dt, steps=self.steps, blend=self.blend, scene=self.scene,
                                 v0=self.v0, integrator=self.integrator)
        field_ = topology.PointField(np.log(r / (1 - r)) / 10.0, 10.0)
        ev = t.evaluate(field_)
        return {int(i): (ev["times"], ev["positions"][:, k].copy()) for k, i in enumerate(self.tracked)}

    def task(self, reference=None):
        ref = self.reference(self.gt_r) if reference is None else reference
        return tasks.SoftTracksTask(self.cloud, ref, dt=self.dt, steps=self.steps, blend=self.blend,
                                    scene=self.scene, v0=self.v0, integrator=self.integrator)


def _cube(spacing, origin):
    return geometry.grid_cloud((3, 3, 3), spacing, origin)


def soft_drop(steps=50, dt=5e-4):
    """27-particle cube falling onto a penalty ground."""
    s = 0.3
    cloud = _cube(s, (0.0, 0.0, 1.5e-3 - 0.5 * s))  # bottom layer 1.5 mm above the ground
    scene = SoftScene(ground=Ground([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]))
    tracked = np.array([0, 13, 26])
    gt = np.linspace(0.2, 0.8, 27)
    v0 = np.tile([0.0, 0.0, -1.0], (27, 1))
    return CubeScene(cloud, scene, MaterialBlend(), "leapfrog", dt, steps, tracked, gt, v0)


def actuated_cube(steps=10, dt=2e-3, pressure=-2e4):
    """27-particle pneumatic cube on a pinned base layer, stepped implicitly."""
    s = 0.3
    cloud = _cube(s, (0.0, 0.0, 0.0))
    base = np.flatnonzero(cloud.rest_positions[:, 2] < 0.5 * s)
    scene = SoftScene(gravity=(0.0, 0.0, -9.81), pressure=PressureRamp(pressure, steps), pinned=base)
    tracked = np.array([18, 22, 26])
    gt = np.linspace(0.8, 0.2, 27)
    return CubeScene(cloud, scene, MaterialBlend.pneumatic(), "implicit", dt, steps, tracked, gt)
