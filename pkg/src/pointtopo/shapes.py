"""Analytic solids for synthetic scenes and shipped example surfaces.

Each shape is a callable signed distance (negative inside). ``sample_surface``
turns one into a dense surface point cloud with outward normals, which is
what an upstream reconstruction step would hand to ``fill_interior``.
"""

from __future__ import annotations

import numpy as np

from .geometry import SurfaceCloud


class Shape:
    def __init__(self, fn, lo, hi):
        self.fn = fn
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))

    def __or__(self, other):
        return Shape(lambda x: np.minimum(self(x), other(x)),
                     np.minimum(self.lo, other.lo), np.maximum(self.hi, other.hi))

    def __and__(self, other):
        return Shape(lambda x: np.maximum(self(x), other(x)),
                     np.maximum(self.lo, other.lo), np.minimum(self.hi, other.hi))

    def __sub__(self, other):
        return Shape(lambda x: np.maximum(self(x), -other(x)), self.lo, self.hi)

    def translate(self, offset):
        offset = np.asarray(offset, dtype=float)
        return Shape(lambda x: self(x - offset), self.lo + offset, self.hi + offset)

    def gradient(self, x, eps=1e-6):
        g = np.empty_like(x)
        for k in range(3):
            e = np.zeros(3)
            e[k] = eps
            g[:, k] = (self(x + e) - self(x - e)) / (2 * eps)
        return g


def sphere(radius, center=(0, 0, 0)):
    c = np.asarray(center, dtype=float)
    return Shape(lambda x: np.linalg.norm(x - c, axis=-1) - radius, c - radius, c + radius)


def box(half_extents, center=(0, 0, 0)):
    b = np.asarray(half_extents, dtype=float)
    c = np.asarray(center, dtype=float)

    def fn(x):
        q = np.abs(x - c) - b
        return np.linalg.norm(np.maximum(q, 0), axis=-1) + np.minimum(q.max(axis=-1), 0)
    return Shape(fn, c - b, c + b)


def ellipsoid(radii, center=(0, 0, 0)):
    r = np.asarray(radii, dtype=float)
    c = np.asarray(center, dtype=float)

    def fn(x):
        # first-order distance estimate, exact on the zero level set
        y = (x - c) / r
        k0 = np.linalg.norm(y, axis=-1)
        k1 = np.linalg.norm(y / r, axis=-1)
        return k0 * (k0 - 1.0) / np.maximum(k1, 1e-12)
    return Shape(fn, c - r, c + r)


def torus(major, minor, center=(0, 0, 0)):
    c = np.asarray(center, dtype=float)

    def fn(x):
        y = x - c
        q = np.linalg.norm(y[..., :2], axis=-1) - major
        return np.hypot(q, y[..., 2]) - minor
    ext = np.array([major + minor, major + minor, minor])
    return Shape(fn, c - ext, c + ext)


def half_space_below(z0):
    big = 1e3
    return Shape(lambda x: x[..., 2] - z0, [-big, -big, -big], [big, big, z0])


def sample_surface(shape: Shape, spacing: float, margin: float | None = None) -> SurfaceCloud:
    """Project a grid band onto the zero level set; returns points with outward normals."""
    margin = 2 * spacing if margin is None else margin
    lo, hi = shape.lo - margin, shape.hi + margin
    axes = [np.arange(lo[k], hi[k] + spacing, spacing) for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    d = shape(grid)
    pts = grid[np.abs(d) < 0.75 * spacing]
    for _ in range(6):
        g = shape.gradient(pts)
        g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        pts = pts - shape(pts)[:, None] * g
    ok = np.abs(shape(pts)) < 1e-3 * spacing
    pts = pts[ok]
    key = np.round(pts / (0.25 * spacing)).astype(np.int64)
    _, first = np.unique(key, axis=0, return_index=True)
    pts = pts[np.sort(first)]
    normals = shape.gradient(pts)
    return SurfaceCloud(pts, normals)


# shipped synthetic solids; sizes in meters
def egg():
    return ellipsoid((0.30, 0.22, 0.20))


def swim_ring():
    return torus(0.22, 0.09)


def boomerang():
    arm_a = box((0.28, 0.07, 0.07), center=(0.10, 0.0, 0.0))
    arm_b = box((0.07, 0.22, 0.07), center=(-0.11, 0.15, 0.0))
    return arm_a | arm_b


def wobbly_doll(base_radius=0.04, head_radius=0.023):
    """Truncated-sphere base (flat top at z=0) carrying a small spherical head."""
    base = sphere(base_radius) & half_space_below(0.0)
    head = sphere(head_radius, center=(0.0, 0.0, 1.25 * head_radius))
    return base | head


def finger(length=0.08, width=0.02, height=0.02):
    return box((length / 2, width / 2, height / 2), center=(length / 2, 0.0, 0.0))


def hawk():
    """Balancing-bird silhouette: body, head, swept wings and a tail plate."""
    body = ellipsoid((0.07, 0.03, 0.03))
    head = sphere(0.02, center=(0.07, 0.0, 0.02))
    wings = box((0.035, 0.13, 0.006), center=(-0.01, 0.0, 0.01))
    tail = box((0.04, 0.02, 0.004), center=(-0.09, 0.0, 0.0))
    return body | head | wings | tail


def pear():
    body = sphere(0.12, center=(0.0, 0.0, 0.12))
    top = sphere(0.08, center=(0.0, 0.0, 0.27))
    return body | top


SHAPES = {
    "egg": egg,
    "swim_ring": swim_ring,
    "boomerang": boomerang,
    "wobbly_doll": wobbly_doll,
    "finger": finger,
    "pear": pear,
    "hawk": hawk,
}
