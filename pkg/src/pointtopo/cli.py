"""Command line front end: ``pointtopo <verb> --config run.yaml [--seed N] [--out DIR] [--threads N]``.

Verbs: fill, simulate, optimize, gradcheck, export-slice, metrics.
Exit codes: 0 success, 1 runtime failure, 2 validation failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import geometry, objectives, rigidsim, snapshot, topology
from .config import ConfigError

log = logging.getLogger("pointtopo")

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


class CommandFailed(RuntimeError):
    """A command ran but its result is a failure (e.g. gradcheck FAIL)."""


# ---------------------------------------------------------------------------
# helpers

def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"not serializable: {type(v).__name__}")


def _load_topology(path, cloud):
    if path is None:
        return None
    topo = topology.from_snapshot(snapshot.load(path))
    n = getattr(topo, "num_params", None)
    if isinstance(topo, topology.PointField) and n != len(cloud):
        raise ConfigError(f"{path}: point field has {n} values for {len(cloud)} particles")
    return topo


def _write_indicator(path, cloud, r):
    X = cloud.rest_positions
    with open(path, "w") as fh:
        fh.write("particle_id,x,y,z,r\n")
        for i in range(len(X)):
            fh.write(f"{i},{float(X[i, 0])!r},{float(X[i, 1])!r},{float(X[i, 2])!r},{float(r[i])!r}\n")


def _scalars(ev):
    """Plain numbers from a task evaluation, for the JSON report."""
    out = {}
    for k, v in ev.items():
        if isinstance(v, (float, int, np.floating)):
            out[k] = float(v)
        elif k == "com":
            out[k] = [float(x) for x in v]
    return out


def _slice_files(cfg, topo, cloud, out, stem="slice"):
    from . import metrics, plotting
    sc = cfg.slice
    sl = metrics.slice_indicator(topo, cloud, sc.axis, sc.offset, tuple(sc.resolution))
    sl.to_pgm(out / f"{stem}.pgm")
    sl.to_png(out / f"{stem}.png")
    plotting.plot_slice(sl, out / f"{stem}_figure.png")
    return sl


def file_digests(directory, skip=("events.jsonl",)):
    """sha256 of every output file, excluding logs that carry wall-clock times."""
    d = Path(directory)
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(d.iterdir()) if p.is_file() and p.name not in skip}


# ---------------------------------------------------------------------------
# commands

def cmd_fill(cfg, args):
    from .pipeline import load_cloud
    cloud = load_cloud(cfg)
    out = cfg.out_path
    cloud.save(out / "cloud.snap")
    summary = {"particles": len(cloud), "volume": cloud.total_volume,
               "boundary": int(cloud.boundary_flags.sum()), "h": cloud.h,
               "isolated": int(cloud.isolated_count)}
    _write_json(out / "fill.json", summary)
    print(f"N={len(cloud)}, volume={cloud.total_volume:.6g}")
    return cloud


def _cloud_for(cfg, args):
    from .pipeline import load_cloud
    if getattr(args, "cloud", None):
        return geometry.ParticleCloud.load(args.cloud)
    return load_cloud(cfg)


def cmd_simulate(cfg, args):
    from . import plotting
    from .pipeline import build_task, initial_topology
    cloud = _cloud_for(cfg, args)
    task = build_task(cfg, cloud)
    topo = _load_topology(args.topology, cloud) or initial_topology(cfg, cloud)
    out = cfg.out_path
    ev = task.evaluate(topo)
    report = {"task": cfg.task, **_scalars(ev)}
    if cfg.task == "rigid_static":
        props = rigidsim.rigid_props(cloud, ev["r"], cfg.scene.density)
        report["inertia"] = props.inertia.tolist()
    elif cfg.task == "rigid_dynamic":
        traj = ev["trajectory"]
        traj.to_csv(out / "trajectory.csv")
        plotting.plot_tilt({"simulated": (traj.times, traj.tilt)}, out / "tilt.png")
    else:
        from .softsim import SoftTrajectory
        if cfg.task == "soft":
            times, pos, ids = ev["times"], ev["positions"], task.tracked
        else:
            ids = np.array(sorted(set(task.base) | set(task.tip)))
            final = ev["final"].x
            times, pos = np.array([cfg.scene.dt * cfg.scene.steps]), final[ids][None]
        SoftTrajectory(times, ids, pos, ev["final"], []).to_csv(out / "trajectory.csv")
        plotting.plot_tracks(times, pos, out / "tracks.png", labels=list(ids))
    _write_indicator(out / "indicator.csv", cloud, ev["r"])
    _write_json(out / "simulate.json", report)
    print(" ".join(f"{k}={v:.6g}" for k, v in report.items() if isinstance(v, float)))
    return report


def cmd_optimize(cfg, args):
    from . import optimizer, plotting
    from .pipeline import build_task, initial_topology, problem
    cloud = _cloud_for(cfg, args)
    task = build_task(cfg, cloud)
    topo0 = _load_topology(args.topology, cloud) or initial_topology(cfg, cloud)
    out = cfg.out_path
    before = task.evaluate(topo0)
    res = optimizer.run(problem(cfg, task, topo0))
    trace = res.trace
    # artifacts are flushed even when the run ended in an error
    trace.to_csv(out / "trace.csv")
    trace.write_events(out / "events.jsonl")
    plotting.plot_trace(trace, out / "trace.png", title=f"{cfg.task} / {cfg.topology.kind}")
    final = res.topology
    snapshot.save(out / "topology.snap", final.to_snapshot())
    report = {"task": cfg.task, "topology": cfg.topology.kind, "method": cfg.optimizer.method,
              "termination": trace.termination, "iterations": len(trace.records),
              "evaluations": trace.evaluations, "before": _scalars(before)}
    if trace.error:
        report["error"] = trace.error
        _write_json(out / "report.json", report)
        raise CommandFailed(f"optimization failed: {trace.error}")
    after = task.evaluate(final)
    report["after"] = _scalars(after)
    _write_indicator(out / "indicator.csv", cloud, after["r"])
    _slice_files(cfg, final, cloud, out)
    if cfg.task == "rigid_dynamic":
        tb, ta = before["trajectory"], after["trajectory"]
        plotting.plot_tilt({"initial": (tb.times, tb.tilt), "optimized": (ta.times, ta.tilt)}, out / "tilt.png")
        ta.to_csv(out / "trajectory.csv")
    _write_json(out / "report.json", report)
    b, a = report["before"], report["after"]
    line = f"loss {b['loss']:.6g} -> {a['loss']:.6g} ({trace.termination}, {len(trace.records)} iterations)"
    if "frequency" in a:
        line += f"; frequency {b['frequency']:.4g} Hz -> {a['frequency']:.4g} Hz"
    if "angle" in a:
        line += f"; bend angle {b['angle']:.4g} -> {a['angle']:.4g} rad"
    print(line)
    return report


def cmd_gradcheck(cfg, args):
    from . import adjoint, plotting
    from .pipeline import build_task, initial_topology
    cloud = _cloud_for(cfg, args)
    task = build_task(cfg, cloud)
    topo = _load_topology(args.topology, cloud) or initial_topology(cfg, cloud)
    gc = cfg.gradcheck
    rep = adjoint.gradcheck(lambda x: task.value_and_grad(topo.with_params(x)), topo.params(),
                            steps=tuple(gc.steps), tolerance=gc.tolerance, sample=gc.sample, seed=cfg.seed)
    out = cfg.out_path
    rep.to_csv(out / "gradcheck.csv")
    plotting.plot_gradcheck(rep, out / "gradcheck.png")
    print(rep.summary())
    if not rep.passed:
        raise CommandFailed(rep.summary())
    return rep


def cmd_export_slice(cfg, args):
    cloud = _cloud_for(cfg, args)
    path = args.topology or cfg.out_path / "topology.snap"
    if not Path(path).is_file():
        raise ConfigError(f"topology snapshot not found: {path}")
    topo = _load_topology(path, cloud)
    if args.axis:
        cfg.slice.axis = args.axis
    if args.offset is not None:
        cfg.slice.offset = args.offset
    if args.resolution:
        try:
            w, h = (int(v) for v in args.resolution.lower().split("x"))
        except ValueError:
            raise ConfigError(f"resolution must look like 64x64, got {args.resolution!r}") from None
        cfg.slice.resolution = [w, h]
    cfg.validate(check_files=False)
    sl = _slice_files(cfg, topo, cloud, cfg.out_path)
    print(f"slice {sl.axis}={sl.offset:.6g}: {sl.image.shape[1]}x{sl.image.shape[0]} pixels, "
          f"mean r {sl.image.mean():.4f}")
    return sl


def cmd_metrics(cfg, args):
    from . import metrics
    if args.topology:
        cloud = _cloud_for(cfg, args)
        topo = _load_topology(args.topology, cloud)
        pts = metrics.interface_points(cloud, topo.indicator(cloud, cfg.topology.pin_boundary).r)
        source = "interface"
    else:
        if cfg.geometry.surface is None:
            raise ConfigError("metrics needs a surface file or --topology")
        pts = geometry.load_surface(cfg.resolve(cfg.geometry.surface)).points
        source = "surface"
    rep = metrics.smoothness(pts, k=args.k)
    out = cfg.out_path
    with open(out / "smoothness.csv", "w") as fh:
        fh.write("point,laplacian\n")
        for i, v in zip(rep.indices, rep.laplacian):
            fh.write(f"{int(i)},{float(v)!r}\n")
    _write_json(out / "metrics.json", {"source": source, "aggregate": rep.aggregate,
                                       "points": len(rep.indices), "skipped": rep.skipped, "k": rep.k})
    print(rep.summary())
    return rep


COMMANDS = {"fill": cmd_fill, "simulate": cmd_simulate, "optimize": cmd_optimize,
            "gradcheck": cmd_gradcheck, "export-slice": cmd_export_slice, "metrics": cmd_metrics}


# ---------------------------------------------------------------------------
# entry point

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration (YAML)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--threads", type=int, default=1, help="numeric library threads (default 1)")
    common.add_argument("--cloud", help="use a saved particle cloud snapshot instead of filling")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pointtopo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("fill", parents=[common], help="fill the surface into a particle cloud")
    for name, text in (("simulate", "forward run of a topology"), ("optimize", "full optimization run"),
                       ("gradcheck", "compare adjoint gradients with finite differences")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--topology", help="topology snapshot (default: configured initial guess)")
    p = sub.add_parser("export-slice", parents=[common], help="grayscale cross-section of a topology")
    p.add_argument("--topology", help="topology snapshot (default: <out>/topology.snap)")
    p.add_argument("--axis", choices=["x", "y", "z"])
    p.add_argument("--offset", type=float)
    p.add_argument("--resolution", help="WxH, e.g. 128x128")
    p = sub.add_parser("metrics", parents=[common], help="surface smoothness score")
    p.add_argument("--topology", help="score the r = 0.5 interface of this topology instead of the surface")
    p.add_argument("--k", type=int, default=12, help="neighbors for the normal fit")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_mod.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output_dir = str(Path(args.out).resolve())
        cfg.validate()
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        out = cfg.out_path
        out.mkdir(parents=True, exist_ok=True)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    from threadpoolctl import threadpool_limits
    try:
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError, objectives.ObjectiveError, geometry.GeometryError,
            snapshot.SnapshotError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
