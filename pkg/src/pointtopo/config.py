"""Run configuration: one YAML file per experiment, validated before any compute.

Relative paths resolve against the directory of the configuration file.
Environment variables prefixed ``POINTTOPO_`` override entries before
validation; ``__`` separates nesting levels and values are parsed as YAML
scalars, e.g. ``POINTTOPO_OPTIMIZER__MAX_ITERS=5`` or
``POINTTOPO_SCENE__STEPS=100``.
"""

from __future__ import annotations

import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

ENV_PREFIX = "POINTTOPO_"
TASKS = ("rigid_static", "rigid_dynamic", "soft", "soft_actuated")
REFERENCE_KINDS = {"rigid_static": "com_target", "rigid_dynamic": "oscillation",
                   "soft": "pivot_tracks", "soft_actuated": "bend_angle"}


class ConfigError(ValueError):
    pass


def _vec(v, n, name):
    if not (isinstance(v, (list, tuple)) and len(v) == n and all(isinstance(x, (int, float)) for x in v)):
        raise ConfigError(f"{name} must be a list of {n} numbers")


def _positive(v, name):
    if not (isinstance(v, (int, float)) and v > 0):
        raise ConfigError(f"{name} must be positive, got {v!r}")


@dataclass
class GridSpec:
    shape: list = field(default_factory=lambda: [3, 3, 3])
    spacing: float = 0.3
    origin: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    kernel_factor: float = 1.5


@dataclass
class GeometryConfig:
    surface: str | None = None
    grid: GridSpec | None = None
    voxel_size: float = 0.03
    jitter: float = 0.0
    kernel_factor: float = 1.5
    remove_outliers: bool = False


@dataclass
class TopologyConfig:
    kind: str = "point"
    beta: float = 10.0
    init: str = "solid"
    r0: float = 0.95
    hidden: list = field(default_factory=lambda: [32, 32])
    pin_boundary: bool = True


@dataclass
class GroundConfig:
    point: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    normal: list = field(default_factory=lambda: [0.0, 0.0, 1.0])
    stiffness: float = 1e5
    clearance: float = 1e-3


@dataclass
class PinConfig:
    axis: str = "x"
    below: float = 0.0


@dataclass
class MarkerConfig:
    base: list = field(default_factory=lambda: [[0.0, 0.0, 0.0], [0.01, 0.0, 0.0]])
    tip: list = field(default_factory=lambda: [[0.07, 0.0, 0.0], [0.08, 0.0, 0.0]])
    normal: list = field(default_factory=lambda: [0.0, 1.0, 0.0])


@dataclass
class SceneConfig:
    density: float = 1000.0
    gravity: list = field(default_factory=lambda: [0.0, 0.0, -9.81])
    # rigid_dynamic
    pivot: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    axis: list = field(default_factory=lambda: [0.0, 1.0, 0.0])
    omega0: list = field(default_factory=lambda: [0.0, 1.0, 0.0])
    weights: list = field(default_factory=lambda: [1.0, 1.0])
    # time stepping (rigid_dynamic and soft tasks)
    dt: float = 5e-3
    steps: int = 200
    checkpoint_every: int = 25
    # soft tasks
    integrator: str = "leapfrog"
    strain: str = "green"
    E_soft: float = 1.5e5
    E_stiff: float = 3e7
    nu: float = 0.4
    ground: GroundConfig | None = None
    initial_velocity: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    pin: PinConfig | None = None
    # soft_actuated
    pressure: float = 0.0
    ramp_steps: int = 0
    markers: MarkerConfig | None = None


@dataclass
class BetaScheduleConfig:
    every: int = 50
    factor: float = 2.0
    beta_max: float = 1e3


@dataclass
class OptimizerConfig:
    method: str = "lbfgsb"
    max_iters: int = 100
    max_evals: int = 1000
    lower: float | None = -1.0
    upper: float | None = 1.0
    lr: float = 1e-2
    memory: int = 10
    tolerance: float = 1e-8
    loss_scale: float = 1.0
    beta_schedule: BetaScheduleConfig | None = None


@dataclass
class GradcheckConfig:
    steps: list = field(default_factory=lambda: [1e-4, 1e-5, 1e-6])
    tolerance: float = 1e-3
    sample: int | None = 8


@dataclass
class SliceConfig:
    axis: str = "z"
    offset: float | None = None
    resolution: list = field(default_factory=lambda: [64, 64])


@dataclass
class RunConfig:
    task: str = "rigid_static"
    seed: int = 0
    output_dir: str = "out"
    reference: str | None = None
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    slice: SliceConfig = field(default_factory=SliceConfig)
    base_dir: str = field(default=".", compare=False, repr=False)

    # -- paths --------------------------------------------------------------------------
    def resolve(self, path):
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out_path(self):
        return self.resolve(self.output_dir)

    # -- serialization ------------------------------------------------------------------
    def to_dict(self):
        d = asdict(self)
        d.pop("base_dir")
        return d

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path):
        Path(path).write_text(self.dump())

    # -- validation -----------------------------------------------------------------------
    def validate(self, check_files=True):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {', '.join(TASKS)}, got {self.task!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        g = self.geometry
        if (g.surface is None) == (g.grid is None):
            raise ConfigError("geometry needs exactly one of 'surface' or 'grid'")
        if g.grid is not None:
            _vec(g.grid.shape, 3, "geometry.grid.shape")
            if any(int(s) != s or s < 1 for s in g.grid.shape):
                raise ConfigError("geometry.grid.shape entries must be positive integers")
            _positive(g.grid.spacing, "geometry.grid.spacing")
            _vec(g.grid.origin, 3, "geometry.grid.origin")
        _positive(g.voxel_size, "geometry.voxel_size")
        if not 0 <= g.jitter < 0.5:
            raise ConfigError("geometry.jitter must lie in [0, 0.5)")
        kf = g.grid.kernel_factor if g.grid is not None else g.kernel_factor
        if not 1.0 <= kf <= 2.0:
            raise ConfigError("kernel_factor must lie in [1, 2]")

        t = self.topology
        if t.kind not in ("point", "quadric", "neural"):
            raise ConfigError(f"topology.kind must be point, quadric or neural, got {t.kind!r}")
        if t.init not in ("solid", "default"):
            raise ConfigError("topology.init must be 'solid' or 'default'")
        _positive(t.beta, "topology.beta")
        if not 0 < t.r0 < 1:
            raise ConfigError("topology.r0 must lie in (0, 1)")
        if not t.hidden or any(not isinstance(w, int) or w < 1 for w in t.hidden):
            raise ConfigError("topology.hidden must list positive layer widths")

        s = self.scene
        _positive(s.density, "scene.density")
        _vec(s.gravity, 3, "scene.gravity")
        _positive(s.dt, "scene.dt")
        if not isinstance(s.steps, int) or s.steps < 1:
            raise ConfigError("scene.steps must be a positive integer")
        if not isinstance(s.checkpoint_every, int) or s.checkpoint_every < 1:
            raise ConfigError("scene.checkpoint_every must be a positive integer")
        if self.task == "rigid_dynamic":
            _vec(s.pivot, 3, "scene.pivot")
            _vec(s.axis, 3, "scene.axis")
            _vec(s.omega0, 3, "scene.omega0")
            if sum(a * a for a in s.axis) == 0:
                raise ConfigError("scene.axis must be nonzero")
        if self.task in ("soft", "soft_actuated"):
            if s.integrator not in ("leapfrog", "implicit"):
                raise ConfigError("scene.integrator must be leapfrog or implicit")
            if s.strain not in ("green", "cauchy"):
                raise ConfigError("scene.strain must be green or cauchy")
            _positive(s.E_soft, "scene.E_soft")
            _positive(s.E_stiff, "scene.E_stiff")
            if not 0 <= s.nu < 0.5:
                raise ConfigError("scene.nu must lie in [0, 0.5)")
            _vec(s.initial_velocity, 3, "scene.initial_velocity")
            if s.ground is not None:
                _vec(s.ground.point, 3, "scene.ground.point")
                _vec(s.ground.normal, 3, "scene.ground.normal")
                if s.ground.stiffness < 0 or s.ground.clearance < 0:
                    raise ConfigError("ground stiffness and clearance must be nonnegative")
            if s.pin is not None and s.pin.axis not in ("x", "y", "z"):
                raise ConfigError("scene.pin.axis must be x, y or z")
        if self.task == "soft_actuated":
            if s.markers is None:
                raise ConfigError("soft_actuated needs scene.markers (base and tip segments)")
            for name in ("base", "tip"):
                seg = getattr(s.markers, name)
                if not (isinstance(seg, list) and len(seg) == 2):
                    raise ConfigError(f"scene.markers.{name} must hold two points")
                for p in seg:
                    _vec(p, 3, f"scene.markers.{name}")
            if s.ramp_steps < 0:
                raise ConfigError("scene.ramp_steps must be nonnegative")

        o = self.optimizer
        if o.method not in ("lbfgsb", "adam"):
            raise ConfigError("optimizer.method must be lbfgsb or adam")
        if not isinstance(o.max_iters, int) or o.max_iters < 0:
            raise ConfigError("optimizer.max_iters must be a nonnegative integer")
        if not isinstance(o.max_evals, int) or o.max_evals < 1:
            raise ConfigError("optimizer.max_evals must be a positive integer")
        if o.lower is not None and o.upper is not None and o.lower > o.upper:
            raise ConfigError(f"optimizer bounds: lower {o.lower} exceeds upper {o.upper}")
        _positive(o.lr, "optimizer.lr")
        _positive(o.loss_scale, "optimizer.loss_scale")
        if o.beta_schedule is not None:
            if o.beta_schedule.every < 1 or o.beta_schedule.factor <= 1 or o.beta_schedule.beta_max <= 0:
                raise ConfigError("optimizer.beta_schedule needs every >= 1, factor > 1, beta_max > 0")

        gc = self.gradcheck
        if not gc.steps or any(not isinstance(h, (int, float)) or h <= 0 for h in gc.steps):
            raise ConfigError("gradcheck.steps must list positive step sizes")
        _positive(gc.tolerance, "gradcheck.tolerance")
        if gc.sample is not None and (not isinstance(gc.sample, int) or gc.sample < 1):
            raise ConfigError("gradcheck.sample must be a positive integer or null")

        sl = self.slice
        if sl.axis not in ("x", "y", "z"):
            raise ConfigError("slice.axis must be x, y or z")
        _vec(sl.resolution, 2, "slice.resolution")
        if any(int(r) != r or r < 1 for r in sl.resolution):
            raise ConfigError("slice.resolution entries must be positive integers")

        if check_files:
            for label, p in (("geometry.surface", g.surface), ("reference", self.reference)):
                if p is not None and not self.resolve(p).is_file():
                    raise ConfigError(f"{label}: file not found: {self.resolve(p)}")
        if self.reference is None and self.task in REFERENCE_KINDS:
            raise ConfigError("reference features file is required")
        return self


# ---------------------------------------------------------------------------
# parsing

_NESTED = {
    (RunConfig, "geometry"): GeometryConfig, (RunConfig, "topology"): TopologyConfig,
    (RunConfig, "scene"): SceneConfig, (RunConfig, "optimizer"): OptimizerConfig,
    (RunConfig, "gradcheck"): GradcheckConfig, (RunConfig, "slice"): SliceConfig,
    (GeometryConfig, "grid"): GridSpec, (SceneConfig, "ground"): GroundConfig,
    (SceneConfig, "pin"): PinConfig, (SceneConfig, "markers"): MarkerConfig,
    (OptimizerConfig, "beta_schedule"): BetaScheduleConfig,
}

_FLOATS = {"voxel_size", "jitter", "kernel_factor", "spacing", "beta", "r0", "density", "dt",
           "E_soft", "E_stiff", "nu", "stiffness", "clearance", "below", "pressure", "lr",
           "tolerance", "loss_scale", "factor", "beta_max", "lower", "upper", "offset"}


def _build(cls, data, where):
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    names = {f.name for f in fields(cls)} - {"base_dir"}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        sub = _NESTED.get((cls, k))
        if sub is not None:
            kwargs[k] = _build(sub, v, f"{where}.{k}" if where else k)
        elif k in _FLOATS and isinstance(v, int) and not isinstance(v, bool):
            kwargs[k] = float(v)
        else:
            kwargs[k] = v
    return cls(**kwargs)


def _set_path(d, keys, value):
    for k in keys[:-1]:
        if d.get(k) is None:
            d[k] = {}
        d = d[k]
    d[keys[-1]] = value


# YAML 1.1 reads "5e-3" (no decimal point) as a string
_SCI = re.compile(r"^[-+]?(\d+\.?\d*|\.\d+)[eE][-+]?\d+$")


def _numbers(v):
    if isinstance(v, dict):
        return {k: _numbers(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_numbers(x) for x in v]
    if isinstance(v, str) and _SCI.match(v.strip()):
        return float(v)
    return v


# environment keys arrive upper-cased; map them back to field names such as E_soft
_FIELD_NAMES = {f.name.lower(): f.name for c in {c for pair in _NESTED for c in (pair[0],)} | set(_NESTED.values())
                for f in fields(c)}


def apply_env(data, environ=None):
    """Return ``data`` with ``POINTTOPO_A__B=value`` overrides applied."""
    environ = os.environ if environ is None else environ
    out = yaml.safe_load(yaml.safe_dump(data)) or {}
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        path = [_FIELD_NAMES.get(p.lower(), p.lower()) for p in key[len(ENV_PREFIX):].split("__") if p]
        if path:
            _set_path(out, path, yaml.safe_load(environ[key]))
    return _numbers(out)


def from_dict(data, base_dir=".", environ=None, check_files=True) -> RunConfig:
    data = apply_env(data or {}, environ)
    cfg = _build(RunConfig, data, "")
    cfg.base_dir = str(base_dir)
    return cfg.validate(check_files)


def parse(text, base_dir=".", environ=None, check_files=True) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    return from_dict(data, base_dir, environ, check_files)


def load(path, environ=None, check_files=True) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse(p.read_text(), p.parent, environ, check_files)
