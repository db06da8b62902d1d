"""Surface smoothness score and cross-section slices of a topology.

Smoothness follows the manufacturing-motivated score: estimate a normal per
surface point by a local plane fit, apply the uniform graph Laplacian to the
normal field and average the magnitudes. PCA normals carry an arbitrary sign,
so each neighbor's normal is flipped to agree with the center's before
averaging; the score is therefore orientation free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .topology import PointField


class MetricsError(ValueError):
    pass


@dataclass
class SmoothnessReport:
    laplacian: np.ndarray      # |L n| per scored point
    indices: np.ndarray        # which input points were scored
    skipped: int               # points with too few neighbors
    k: int

    @property
    def aggregate(self) -> float:
        return float(self.laplacian.mean()) if len(self.laplacian) else 0.0

    def summary(self):
        return (f"smoothness {self.aggregate:.6g} over {len(self.indices)} points "
                f"({self.skipped} skipped, k={self.k})")


def pca_normals(points, neighbors):
    """Unit normal per row of ``neighbors`` (indices into ``points``, self included)."""
    P = points[neighbors]
    Q = P - P.mean(axis=1, keepdims=True)
    C = np.einsum("nki,nkj->nij", Q, Q)
    _, V = np.linalg.eigh(C)
    return V[:, :, 0]


def smoothness(points, k=12, radius=None, min_neighbors=6) -> SmoothnessReport:
    """Mean |L n| over surface points.

    Neighbors are the ``k`` nearest points within ``radius`` (default: three
    times the median nearest-neighbor spacing). Points with fewer than
    ``min_neighbors`` such neighbors are skipped and counted.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < k + 1:
        raise MetricsError(f"need more than {k} points, got {len(pts)}")
    tree = cKDTree(pts)
    dist, idx = tree.query(pts, k=k + 1)
    if radius is None:
        radius = 3.0 * float(np.median(dist[:, 1]))
    within = dist[:, 1:] <= radius
    counts = within.sum(axis=1)
    ok = counts >= min_neighbors
    normals = pca_normals(pts, idx)
    nb = idx[:, 1:]
    nn = normals[nb]                                            # (n, k, 3)
    sign = np.sign(np.einsum("nkj,nj->nk", nn, normals))
    sign[sign == 0] = 1.0
    w = within / np.maximum(counts, 1)[:, None]
    mean_nb = np.einsum("nk,nk,nkj->nj", w, sign, nn)
    lap = np.linalg.norm(normals - mean_nb, axis=1)
    sel = np.flatnonzero(ok)
    return SmoothnessReport(lap[sel], sel, int((~ok).sum()), k)


def interface_points(cloud, r, level=0.5):
    """Points where the indicator crosses ``level`` along neighbor pairs (linear interpolation)."""
    i, j = cloud.pairs()
    keep = i < j
    i, j = i[keep], j[keep]
    ri, rj = r[i], r[j]
    cross = (ri - level) * (rj - level) < 0
    i, j = i[cross], j[cross]
    t = (level - r[i]) / (r[j] - r[i])
    X = cloud.rest_positions
    return X[i] + t[:, None] * (X[j] - X[i])


# ---------------------------------------------------------------------------
# slices

_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass
class Slice:
    image: np.ndarray          # (rows, cols) indicator values, row 0 at the top
    axis: str
    offset: float
    extent: tuple              # (u_min, u_max, v_min, v_max)

    def to_pgm(self, path):
        rows, cols = self.image.shape
        px = np.clip(np.rint(255.0 * self.image), 0, 255).astype(int)
        with open(path, "w") as fh:
            fh.write(f"P2\n# indicator slice {self.axis}={self.offset!r}\n{cols} {rows}\n255\n")
            for row in px:
                fh.write(" ".join(str(v) for v in row) + "\n")

    def to_png(self, path):
        from .plotting import save_gray_png
        save_gray_png(path, self.image)


def read_pgm(path):
    with open(path) as fh:
        tokens = [t for line in fh for t in line.split("#")[0].split()]
    if tokens[0] != "P2":
        raise MetricsError(f"{path}: not a text PGM file")
    cols, rows, maxval = (int(t) for t in tokens[1:4])
    data = np.array([int(t) for t in tokens[4:4 + rows * cols]], dtype=float)
    return data.reshape(rows, cols) / maxval


def slice_indicator(topo, cloud, axis="z", offset=None, resolution=(64, 64)):
    """Raster of r on an axis-aligned plane across the cloud's bounding box.

    Pixel centers split the box evenly, so a 1x1 raster samples the plane
    center. The point field is sampled at the nearest particle, surface
    representations directly through their signed distance.
    """
    if axis not in _AXES:
        raise MetricsError(f"plane axis must be one of x, y, z, got {axis!r}")
    a = _AXES[axis]
    u, v = [k for k in range(3) if k != a]
    X = cloud.rest_positions
    lo, hi = X.min(0), X.max(0)
    offset = 0.5 * (lo[a] + hi[a]) if offset is None else float(offset)
    if not lo[a] <= offset <= hi[a]:
        raise MetricsError(f"empty intersection: plane {axis}={offset} misses [{lo[a]}, {hi[a]}]")
    cols, rows = (int(resolution[0]), int(resolution[1]))
    if cols < 1 or rows < 1:
        raise MetricsError("resolution must be at least 1x1")
    us = lo[u] + (np.arange(cols) + 0.5) * (hi[u] - lo[u]) / cols
    vs = hi[v] - (np.arange(rows) + 0.5) * (hi[v] - lo[v]) / rows
    U, V = np.meshgrid(us, vs)
    P = np.empty((rows * cols, 3))
    P[:, a] = offset
    P[:, u] = U.ravel()
    P[:, v] = V.ravel()
    if isinstance(topo, PointField):
        r = topo.indicator(cloud).r
        _, near = cKDTree(X).query(P)
        vals = r[near]
    else:
        vals = topo.r_at(P)
    return Slice(vals.reshape(rows, cols), axis, offset, (lo[u], hi[u], lo[v], hi[v]))
