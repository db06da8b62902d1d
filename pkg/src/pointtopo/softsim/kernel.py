"""Cubic spline SPH kernel with support radius 2h."""

from __future__ import annotations

import numpy as np


def _q(rvec, h):
    rvec = np.asarray(rvec, dtype=float)
    dist = np.linalg.norm(rvec, axis=-1)
    return rvec, dist, dist / h


def kernel(rvec, h):
    """W(r, h) = 1/(pi h^3) * f(|r|/h); accepts (..., 3) arrays."""
    _, _, q = _q(rvec, h)
    f = np.where(q < 1.0, 1.0 - 1.5 * q ** 2 + 0.75 * q ** 3,
                 np.where(q < 2.0, 0.25 * (2.0 - q) ** 3, 0.0))
    return f / (np.pi * h ** 3)


def kernel_grad(rvec, h):
    """Gradient of W with respect to rvec; zero at the origin and outside the support."""
    rvec, dist, q = _q(rvec, h)
    df = np.where(q < 1.0, -3.0 * q + 2.25 * q ** 2,
                  np.where(q < 2.0, -0.75 * (2.0 - q) ** 2, 0.0))
    scale = np.divide(df, dist * np.pi * h ** 4, out=np.zeros_like(dist), where=dist > 0)
    return scale[..., None] * rvec


def sph_density(cloud, masses):
    """rho_i = m_i W(0) + sum over neighbors m_j W(X_i - X_j)."""
    masses = np.asarray(masses, dtype=float)
    X = cloud.rest_positions
    i, j = cloud.pairs()
    w = masses[j] * kernel(X[i] - X[j], cloud.h)
    rho = masses * kernel(np.zeros(3), cloud.h)
    return rho + np.bincount(i, weights=w, minlength=len(X))
