"""Surface point clouds, interior filling and particle neighborhoods."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import snapshot

log = logging.getLogger(__name__)


class GeometryError(ValueError):
    """Raised for malformed or degenerate geometric input."""


class FormatError(GeometryError):
    def __init__(self, msg, line=None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass
class SurfaceCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(n) != len(self.points):
                raise GeometryError("inconsistent normals")
            length = np.linalg.norm(n, axis=1)
            if np.any(length < 1e-12):
                raise GeometryError("zero-length normal")
            # leave float32-rounded unit normals alone so load/save round-trips
            off = np.abs(length - 1.0) > 1e-6
            n[off] /= length[off, None]
            self.normals = n

    def __len__(self):
        return len(self.points)


@dataclass
class FillConfig:
    voxel_size: float
    jitter: float = 0.0
    seed: int = 0
    kernel_factor: float = 1.5
    outlier_removal: bool = False
    outlier_neighbors: int = 16
    outlier_std_ratio: float = 2.0

    def validate(self, diagonal: float | None = None):
        if not self.voxel_size > 0:
            raise GeometryError("voxel_size must be positive")
        if not 0 <= self.jitter < 0.5:
            raise GeometryError("jitter must lie in [0, 0.5)")
        if not 1.0 <= self.kernel_factor <= 2.0:
            raise GeometryError("kernel_factor must lie in [1, 2]")
        if diagonal is not None and not self.voxel_size < 0.5 * diagonal:
            raise GeometryError(
                f"voxel_size {self.voxel_size} is not smaller than half the "
                f"bounding-box diagonal {diagonal:.6g}")


@dataclass
class ParticleCloud:
    """Volumetric particles with their rest volumes and neighborhood structure.

    Neighbors are stored in CSR form: the neighbors of particle ``i`` are
    ``neighbor_index[neighbor_offset[i]:neighbor_offset[i + 1]]``, sorted.
    """

    rest_positions: np.ndarray
    volumes: np.ndarray
    boundary_flags: np.ndarray
    h: float
    neighbor_offset: np.ndarray = field(default=None, repr=False)
    neighbor_index: np.ndarray = field(default=None, repr=False)
    isolated_count: int = 0

    def __post_init__(self):
        self.rest_positions = np.asarray(self.rest_positions, dtype=float).reshape(-1, 3)
        n = len(self.rest_positions)
        self.volumes = np.asarray(self.volumes, dtype=float).reshape(n)
        self.boundary_flags = np.asarray(self.boundary_flags, dtype=bool).reshape(n)
        if np.any(self.volumes <= 0):
            raise GeometryError("particle volumes must be positive")
        if not self.h > 0:
            raise GeometryError("kernel radius h must be positive")

    def __len__(self):
        return len(self.rest_positions)

    @property
    def has_neighbors(self) -> bool:
        return self.neighbor_offset is not None

    def neighbors(self, i: int) -> np.ndarray:
        return self.neighbor_index[self.neighbor_offset[i]:self.neighbor_offset[i + 1]]

    @property
    def neighbor_lists(self) -> list[np.ndarray]:
        return [self.neighbors(i) for i in range(len(self))]

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Directed (center, neighbor) index arrays, sorted by center."""
        counts = np.diff(self.neighbor_offset)
        centers = np.repeat(np.arange(len(self)), counts)
        return centers, self.neighbor_index.copy()

    @property
    def total_volume(self) -> float:
        return float(self.volumes.sum())

    def to_snapshot(self) -> snapshot.Snapshot:
        arrays = {
            "rest_positions": self.rest_positions,
            "volumes": self.volumes,
            "boundary_flags": self.boundary_flags,
        }
        if self.has_neighbors:
            arrays["neighbor_offset"] = self.neighbor_offset
            arrays["neighbor_index"] = self.neighbor_index
        return snapshot.Snapshot("particle_cloud", {"h": self.h}, arrays)

    @classmethod
    def from_snapshot(cls, snap: snapshot.Snapshot) -> "ParticleCloud":
        if snap.kind != "particle_cloud":
            raise snapshot.SnapshotError(f"not a particle cloud snapshot: {snap.kind}")
        a = snap.arrays
        cloud = cls(a["rest_positions"], a["volumes"], a["boundary_flags"], float(snap.meta["h"]))
        if "neighbor_offset" in a:
            cloud.neighbor_offset = a["neighbor_offset"]
            cloud.neighbor_index = a["neighbor_index"]
        return cloud

    def save(self, path):
        snapshot.save(path, self.to_snapshot())

    @classmethod
    def load(cls, path) -> "ParticleCloud":
        return cls.from_snapshot(snapshot.load(path))


# ---------------------------------------------------------------------------
# point-cloud files

def _parse_ply_header(lines, path):
    if not lines or lines[0].strip() != "ply":
        raise FormatError("missing 'ply' magic", 1)
    elements = []  # (name, count, [props])
    fmt = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else None
            if fmt != "ascii":
                raise FormatError(f"only ASCII PLY is supported, got format {fmt!r}", lineno)
        elif tok[0] == "element":
            if len(tok) != 3:
                raise FormatError("malformed element line", lineno)
            try:
                elements.append((tok[1], int(tok[2]), []))
            except ValueError:
                raise FormatError("element count is not an integer", lineno) from None
        elif tok[0] == "property":
            if not elements:
                raise FormatError("property before any element", lineno)
            if tok[1] == "list":
                elements[-1][2].append(("list", tok[-1]))
            else:
                if len(tok) != 3:
                    raise FormatError("malformed property line", lineno)
                elements[-1][2].append((tok[1], tok[2]))
        elif tok[0] == "end_header":
            if fmt is None:
                raise FormatError("missing format line", lineno)
            return elements, lineno
        else:
            raise FormatError(f"unexpected header keyword {tok[0]!r}", lineno)
    raise FormatError(f"{path}: missing end_header")


def _parse_rows(body_lines, ncols, first_lineno, allow_xyz_only=False):
    """Parse whitespace-separated rows; fast path first, slow path for diagnostics."""
    text = "\n".join(body_lines)
    try:
        flat = np.array(text.split(), dtype=float)
    except ValueError:
        flat = None
    nrows = len(body_lines)
    if flat is not None and flat.size == nrows * ncols:
        return flat.reshape(nrows, ncols)
    for k, line in enumerate(body_lines):
        tok = line.split()
        lineno = first_lineno + k
        if len(tok) != ncols:
            if allow_xyz_only and ncols >= 6 and len(tok) == ncols - 3:
                raise FormatError("inconsistent normals", lineno)
            raise FormatError(f"expected {ncols} values, found {len(tok)}", lineno)
        try:
            [float(t) for t in tok]
        except ValueError:
            raise FormatError(f"non-numeric value in {line.strip()!r}", lineno) from None
    raise FormatError("could not parse point rows")  # pragma: no cover


def load_surface(path) -> SurfaceCloud:
    """Read an ASCII PLY (vertex x,y,z[,nx,ny,nz]) or plain ``.xyz`` text file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"surface file not found: {path}")
    lines = path.read_text().splitlines()
    if lines and lines[0].strip() == "ply":
        elements, end = _parse_ply_header(lines, path)
        body = lines[end:]
        cursor = 0
        points = normals = None
        for name, count, props in elements:
            if name != "vertex":
                cursor += count
                continue
            names = [p[1] for p in props]
            if any(p[0] == "list" for p in props):
                raise FormatError("list properties are not allowed on vertices", end)
            for axis in "xyz":
                if axis not in names:
                    raise FormatError(f"vertex element lacks property {axis!r}", end)
            has_n = [a in names for a in ("nx", "ny", "nz")]
            if any(has_n) and not all(has_n):
                raise FormatError("inconsistent normals", end)
            rows = body[cursor:cursor + count]
            if len(rows) < count:
                raise FormatError(f"expected {count} vertices, file ends early", end + len(rows) + 1)
            blank = [k for k, r in enumerate(rows) if not r.strip()]
            if blank:
                raise FormatError("blank vertex row", end + blank[0] + 1)
            data = _parse_rows(rows, len(names), end + cursor + 1,
                               allow_xyz_only=all(has_n))
            cursor += count
            points = data[:, [names.index(a) for a in "xyz"]]
            if all(has_n):
                normals = data[:, [names.index(a) for a in ("nx", "ny", "nz")]]
        if points is None:
            raise FormatError("no vertex element")
    else:
        rows = [ln for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
        if not rows:
            raise GeometryError("degenerate input: file contains no points")
        widths = {len(r.split()) for r in rows}
        if widths == {3, 6}:
            bad = next(k for k, r in enumerate(lines) if len(r.split()) == 3)
            raise FormatError("inconsistent normals", bad + 1)
        ncols = widths.pop() if len(widths) == 1 else 3
        if ncols not in (3, 6):
            raise FormatError(f"expected 3 or 6 columns, found {ncols}", 1)
        data = _parse_rows(rows, ncols, 1)
        points = data[:, :3]
        normals = data[:, 3:6] if ncols == 6 else None
    if len(points) < 4:
        raise GeometryError(f"degenerate input: {len(points)} points, need at least 4")
    if np.linalg.matrix_rank(points - points.mean(0), tol=1e-12 * max(1.0, np.ptp(points))) < 3:
        raise GeometryError("degenerate input: points are coplanar")
    return SurfaceCloud(points, normals)


def save_surface(path, surface: SurfaceCloud) -> None:
    """Write an ASCII PLY with float32 properties.

    Values are printed with 9 significant digits, which round-trips float32
    exactly, so load-then-save reproduces the file byte for byte.
    """
    cols = [surface.points]
    props = ["x", "y", "z"]
    if surface.normals is not None:
        cols.append(surface.normals)
        props += ["nx", "ny", "nz"]
    data = np.hstack(cols).astype(np.float32).astype(np.float64)
    header = ["ply", "format ascii 1.0", f"element vertex {len(data)}"]
    header += [f"property float {p}" for p in props]
    header.append("end_header")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(header) + "\n")
        np.savetxt(fh, data, fmt="%.9g", delimiter=" ")


def remove_statistical_outliers(surface: SurfaceCloud, neighbors=16, std_ratio=2.0) -> SurfaceCloud:
    """Drop points whose mean k-NN distance exceeds mean + std_ratio * std."""
    k = min(neighbors + 1, len(surface))
    dist, _ = cKDTree(surface.points).query(surface.points, k=k)
    mean_d = dist[:, 1:].mean(axis=1)
    keep = mean_d <= mean_d.mean() + std_ratio * mean_d.std()
    normals = surface.normals[keep] if surface.normals is not None else None
    return SurfaceCloud(surface.points[keep], normals)


# ---------------------------------------------------------------------------
# interior filling

def _oriented_normals(points, given, exterior_centers):
    """Unit normals pointing away from the enclosed volume."""
    if given is not None:
        return given
    tree = cKDTree(points)
    k = min(10, len(points))
    _, idx = tree.query(points, k=k)
    nbr = points[idx] - points[idx].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nbr, nbr)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    _, ext = cKDTree(exterior_centers).query(points)
    outward = exterior_centers[ext] - points
    flip = np.einsum("ij,ij->i", normals, outward) < 0
    normals[flip] *= -1
    return normals


def fill_interior(surface: SurfaceCloud, cfg: FillConfig) -> ParticleCloud:
    """Voxelize the surface, flood-fill the exterior and emit one particle per solid voxel.

    Voxels hit by surface samples form a shell. Shell voxels whose centers lie
    outside the surface (judged against the oriented normal of the nearest
    sample) are discarded so that the particle volume tracks the enclosed
    volume instead of overshooting by half a voxel layer.
    """
    if cfg.outlier_removal:
        surface = remove_statistical_outliers(surface, cfg.outlier_neighbors, cfg.outlier_std_ratio)
    pts = surface.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    cfg.validate(float(np.linalg.norm(hi - lo)))
    vs = float(cfg.voxel_size)
    n = np.maximum(1, np.ceil((hi - lo) / vs - 1e-9).astype(int))
    origin = 0.5 * (lo + hi) - 0.5 * n * vs - vs  # one padding layer
    dims = tuple(n + 2)

    idx = np.floor((pts - origin) / vs).astype(int)
    idx = np.clip(idx, 1, n)
    shell = np.zeros(dims, dtype=bool)
    shell[idx[:, 0], idx[:, 1], idx[:, 2]] = True

    labels, _ = ndimage.label(~shell, structure=ndimage.generate_binary_structure(3, 1))
    border = np.unique(np.concatenate([
        labels[0].ravel(), labels[-1].ravel(), labels[:, 0].ravel(),
        labels[:, -1].ravel(), labels[:, :, 0].ravel(), labels[:, :, -1].ravel()]))
    exterior = np.isin(labels, border[border > 0])
    interior = ~shell & ~exterior
    if not interior.any():
        if np.any(n < 3):
            raise GeometryError("no enclosed volume")
        raise GeometryError("non-watertight input")

    grid = np.indices(dims).reshape(3, -1).T
    centers = origin + (grid + 0.5) * vs
    flat_shell = shell.ravel()
    shell_centers = centers[flat_shell]
    normals = _oriented_normals(pts, surface.normals, centers[exterior.ravel()])
    _, near = cKDTree(pts).query(shell_centers)
    inside = np.einsum("ij,ij->i", shell_centers - pts[near], normals[near]) <= 0
    solid = interior.copy()
    solid.ravel()[np.flatnonzero(flat_shell)[inside]] = True

    # 6-neighborhood test for voxels adjacent to non-solid space
    padded = np.pad(solid, 1, constant_values=False)
    touches = np.zeros_like(solid)
    for axis in range(3):
        for shift in (-1, 1):
            touches |= ~np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    boundary = (solid & touches).ravel()

    keep = solid.ravel()
    positions = centers[keep]
    if cfg.jitter > 0:
        rng = np.random.default_rng(cfg.seed)
        positions = positions + rng.uniform(-cfg.jitter, cfg.jitter, positions.shape) * vs
    volumes = np.full(len(positions), vs ** 3)
    cloud = ParticleCloud(positions, volumes, boundary[keep], cfg.kernel_factor * vs)
    return build_neighbors(cloud)


def build_neighbors(cloud: ParticleCloud) -> ParticleCloud:
    """Attach sorted, symmetric neighbor lists of all particles within 2h (self excluded)."""
    x = cloud.rest_positions
    if not np.all(np.isfinite(x)):
        raise GeometryError("non-finite particle positions")
    radius = 2.0 * cloud.h
    pairs = cKDTree(x).query_pairs(radius, output_type="ndarray")
    if len(pairs):
        d = np.linalg.norm(x[pairs[:, 0]] - x[pairs[:, 1]], axis=1)
        pairs = pairs[d < radius]
    i = np.concatenate([pairs[:, 0], pairs[:, 1]]).astype(np.int64)
    j = np.concatenate([pairs[:, 1], pairs[:, 0]]).astype(np.int64)
    order = np.lexsort((j, i))
    i, j = i[order], j[order]
    counts = np.bincount(i, minlength=len(x))
    offset = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    isolated = int(np.sum(counts == 0))
    if isolated:
        log.warning("%d particles have no neighbors within 2h", isolated)
    return replace(cloud, neighbor_offset=offset, neighbor_index=j, isolated_count=isolated)


def grid_cloud(shape, spacing=1.0, origin=(0.0, 0.0, 0.0), kernel_factor=1.5) -> ParticleCloud:
    """Regular block of particles; handy for tests and analytic scenes."""
    idx = np.indices(shape).reshape(3, -1).T
    pos = np.asarray(origin, dtype=float) + (idx + 0.5) * spacing
    nx, ny, nz = shape
    boundary = ((idx == 0) | (idx == np.array(shape) - 1)).any(axis=1)
    cloud = ParticleCloud(pos, np.full(len(pos), spacing ** 3), boundary, kernel_factor * spacing)
    return build_neighbors(cloud)


def bounding_diagonal(points) -> float:
    points = np.asarray(points)
    return float(math.dist(points.min(axis=0), points.max(axis=0)))
