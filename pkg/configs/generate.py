"""Regenerate the surface files and reference features used by the example configs.

    python configs/generate.py

Each reference comes from a known ground-truth interior evaluated on the
cloud that the config itself produces, so every target is reachable.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from pointtopo import config, geometry, objectives, pipeline, rigidsim, scenes, shapes, topology

HERE = Path(__file__).resolve().parent
DATA = HERE / "data"

# surface sample spacing per shipped shape
SURFACES = {"egg": 0.01, "swim_ring": 0.025 / 3, "boomerang": 0.01, "hawk": 0.0015,
            "wobbly_doll": 0.0015, "finger": 0.004 / 3}


def point_field(r, beta=10.0):
    r = np.clip(np.asarray(r, dtype=float), 1e-9, 1 - 1e-9)
    return topology.PointField(np.log(r / (1 - r)) / beta, beta)


def write_surfaces():
    for name, spacing in SURFACES.items():
        geometry.save_surface(DATA / f"{name}.ply", shapes.sample_surface(shapes.SHAPES[name](), spacing))


def reference(cfg, cloud, truth):
    s = cfg.scene
    if cfg.task == "rigid_static":
        return objectives.MotionFeatures("com_target", target=scenes.com_of(cloud, truth, s.density))
    if cfg.task == "rigid_dynamic":
        scene = pipeline.rigid_scene(cfg)
        props = rigidsim.rigid_props(cloud, truth, s.density)
        y0 = rigidsim.constrained_initial_state(props, scene, omega=np.asarray(s.omega0, dtype=float))
        traj = rigidsim.simulate_rigid(y0, props, scene, s.dt, s.steps)
        osc = objectives.extract_oscillation(traj.times, traj.tilt)
        return objectives.MotionFeatures("oscillation", period=osc.period, max_tilt=osc.max_tilt)
    if cfg.task == "soft":
        ids = (0, 13, 26)
        dummy = objectives.MotionFeatures("pivot_tracks",
                                          tracks={i: (np.array([0.0, 1.0]), np.zeros((2, 3))) for i in ids})
        ev = pipeline.build_task(cfg, cloud, dummy).evaluate(point_field(truth))
        return objectives.MotionFeatures("pivot_tracks", tracks={
            i: (ev["times"], ev["positions"][:, k]) for k, i in enumerate(ids)})
    dummy = objectives.MotionFeatures("bend_angle", angle=0.0)
    ev = pipeline.build_task(cfg, cloud, dummy).evaluate(point_field(truth))
    return objectives.MotionFeatures("bend_angle", angle=float(ev["angle"]))


# config -> ground-truth rule
TRUTHS = {
    "seesaw": None,
    "hanging_egg": scenes.hanging_truth,
    "hanging_swim_ring": scenes.hanging_truth,
    "hanging_boomerang": scenes.hanging_truth,
    "hawk_quadric": scenes.hawk_truth,
    "doll": scenes.doll_truth,
    "soft_drop": lambda c: np.linspace(0.2, 0.8, len(c)),
    "finger": scenes.finger_truth,
}


def main():
    DATA.mkdir(exist_ok=True)
    write_surfaces()
    for name, truth_fn in TRUTHS.items():
        cfg = config.load(HERE / f"{name}.yaml", environ={}, check_files=False)
        cloud = pipeline.load_cloud(cfg)
        if name == "seesaw":
            # the analytic optimum puts all mass on the left particle
            feats = objectives.MotionFeatures("com_target", target=cloud.rest_positions[0].copy())
        else:
            feats = reference(cfg, cloud, truth_fn(cloud))
        objectives.save_reference(cfg.resolve(cfg.reference), feats)
        print(f"{name}: {len(cloud)} particles -> {cfg.reference}")


if __name__ == "__main__":
    main()
