"""Corotated SPH elasticity: stencil, rotation extraction, energies and their derivatives.

Positions are (n, 3) arrays. For a particle i with neighbor pairs p = (i, j),

    D_i = sum_p w_p (x_j - x_i) (outer) g_p,   g_p = grad W(X_i - X_j)
    F_i = I + D_i^T R_i - D0_i^T

with D0 the same sum over rest positions and w_p = m_j / rho_j. With R held
fixed F is linear in x, which is what every derivative below exploits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .kernel import kernel, kernel_grad, sph_density

EYE = np.eye(3)


class SoftSimError(RuntimeError):
    pass


class InvertedElementError(SoftSimError):
    def __init__(self, index):
        super().__init__(f"inverted element: det(F) <= 0 at particle {index}")
        self.index = int(index)


def young_to_lame(E, nu):
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


def skew(v):
    v = np.asarray(v)
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=v.dtype)
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def axial(K):
    return np.stack([K[..., 2, 1], K[..., 0, 2], K[..., 1, 0]], axis=-1)


def _T(A):
    return np.swapaxes(A, -1, -2)


@dataclass
class SoftMaterial:
    """Per-particle Lame parameters plus the actuation chamber weight."""

    mu: np.ndarray
    lam: np.ndarray
    chamber: np.ndarray | None = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.lam = np.asarray(self.lam, dtype=float)
        if np.any(self.mu < 0) or np.any(self.lam < 0):
            raise ValueError("Lame parameters must be non-negative")
        if self.chamber is not None:
            self.chamber = np.asarray(self.chamber, dtype=float)


@dataclass
class MaterialBlend:
    """Affine Young's-modulus blend between a soft and a stiff phase.

    ``mu_i = mu_soft + r_i (mu_stiff - mu_soft)`` (likewise lambda). When
    ``chamber`` is set the hollow fraction 1 - r_i becomes the pressure
    chamber weight.
    """

    E_soft: float = 1.5e5
    E_stiff: float = 3e7
    nu: float = 0.4
    chamber: bool = False

    @classmethod
    def pneumatic(cls, E=1.5e5, nu=0.4, void_scale=1e-3):
        return cls(E * void_scale, E, nu, chamber=True)

    def lame_ends(self):
        return young_to_lame(self.E_soft, self.nu), young_to_lame(self.E_stiff, self.nu)

    def __call__(self, r):
        (mu0, lam0), (mu1, lam1) = self.lame_ends()
        r = np.asarray(r, dtype=float)
        w = 1.0 - r if self.chamber else None
        return SoftMaterial(mu0 + r * (mu1 - mu0), lam0 + r * (lam1 - lam0), w)

    def vjp(self, mu_bar, lam_bar, chamber_bar=None):
        """Pull (mu, lambda, chamber) cotangents back to the indicator."""
        (mu0, lam0), (mu1, lam1) = self.lame_ends()
        r_bar = mu_bar * (mu1 - mu0) + lam_bar * (lam1 - lam0)
        if self.chamber and chamber_bar is not None:
            r_bar = r_bar - chamber_bar
        return r_bar


@dataclass
class EnergyReport:
    elastic: float
    actuation: float
    penalty: float
    psi: np.ndarray
    stress: np.ndarray

    @property
    def total(self):
        return self.elastic + self.actuation + self.penalty


@dataclass
class Ground:
    point: np.ndarray
    normal: np.ndarray
    stiffness: float = 1e5
    clearance: float = 1e-3

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float)
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError("ground normal must have unit length")
        self.normal = n
        if self.stiffness < 0 or self.clearance < 0:
            raise ValueError("penalty stiffness and clearance must be non-negative")

    def distance(self, x):
        return (x - self.point) @ self.normal


# ---------------------------------------------------------------------------
# constitutive law

def strain(F, kind):
    if kind == "green":
        return 0.5 * (_T(F) @ F - EYE)
    if kind == "cauchy":
        return 0.5 * (F + _T(F)) - EYE
    raise ValueError(f"unknown strain kind {kind!r}")


def stvk(F, mu, lam, kind="green"):
    """Energy density psi and first Piola stress P for each F."""
    eps = strain(F, kind)
    tr = np.trace(eps, axis1=-2, axis2=-1)
    psi = mu * np.sum(eps * eps, axis=(-2, -1)) + 0.5 * lam * tr ** 2
    S = 2.0 * mu[:, None, None] * eps + (lam * tr)[:, None, None] * EYE
    P = F @ S if kind == "green" else S
    return psi, P


def stvk_jvp(F, dF, mu, lam, kind="green"):
    """Directional derivative of P along dF (the Hessian of psi is symmetric, so this is also the VJP)."""
    m, l = mu[:, None, None], lam[:, None, None]
    if kind == "cauchy":
        d = 0.5 * (dF + _T(dF))
        return 2.0 * m * d + l * np.trace(d, axis1=-2, axis2=-1)[:, None, None] * EYE
    eps = strain(F, kind)
    tr = np.trace(eps, axis1=-2, axis2=-1)[:, None, None]
    S = 2.0 * m * eps + l * tr * EYE
    de = 0.5 * (_T(F) @ dF + _T(dF) @ F)
    dS = 2.0 * m * de + l * np.trace(de, axis1=-2, axis2=-1)[:, None, None] * EYE
    return dF @ S + F @ dS


def stvk_param_derivs(F, kind="green"):
    """dP/dmu and dP/dlambda per particle."""
    eps = strain(F, kind)
    tr = np.trace(eps, axis1=-2, axis2=-1)[:, None, None]
    if kind == "green":
        return 2.0 * F @ eps, tr * F
    return 2.0 * eps, tr * EYE


def cofactor(F):
    det = np.linalg.det(F)
    return det, det[:, None, None] * _T(np.linalg.inv(F))


def cofactor_jvp(F, dF):
    det = np.linalg.det(F)
    Fit = _T(np.linalg.inv(F))
    tr = np.sum(Fit * dF, axis=(-2, -1))[:, None, None]
    return det[:, None, None] * (tr * Fit - Fit @ _T(dF) @ Fit)


# ---------------------------------------------------------------------------
# particle body

class SoftBody:
    """Stencil data for one particle cloud with fixed rest masses.

    ``weighting="density"`` uses m_j / rho_j quadrature weights; ``"volume"``
    uses the rest volumes V_j instead.
    """

    def __init__(self, cloud, masses, weighting="density"):
        if not cloud.has_neighbors:
            raise ValueError("particle cloud needs neighbor lists")
        self.cloud = cloud
        self.n = len(cloud)
        self.X = cloud.rest_positions
        self.masses = np.asarray(masses, dtype=float)
        self.volumes = cloud.volumes
        self.density = sph_density(cloud, self.masses)
        self.vol = self.masses / self.density
        i, j = cloud.pairs()
        self.i, self.j = i, j
        self.offset = cloud.neighbor_offset
        rv = self.X[i] - self.X[j]
        self.g = kernel_grad(rv, cloud.h)
        if weighting == "density":
            self.w = self.vol[j]
        elif weighting == "volume":
            self.w = self.volumes[j]
        else:
            raise ValueError(f"unknown weighting {weighting!r}")
        self.weighting = weighting
        self.mw = self.masses[j] * kernel(rv, cloud.h)
        self.dX = self.X[j] - self.X[i]
        # index of the reverse pair (j, i) for every pair (i, j)
        self.rev = np.lexsort((i, j))
        self.D0 = self.stencil(self.X)
        self._wg = self.w[:, None] * self.g

    # sums over the pairs of each center, in stored (sorted) order
    def seg(self, vals):
        out = np.zeros((self.n,) + vals.shape[1:])
        if len(vals) == 0:
            return out
        counts = np.diff(self.offset)
        nz = counts > 0
        out[nz] = np.add.reduceat(vals, self.offset[:-1][nz], axis=0)
        return out

    def scatter(self, vec):
        """x_bar with x_bar[j] += vec_p and x_bar[i] -= vec_p."""
        return self.seg(vec[self.rev]) - self.seg(vec)

    def stencil(self, x):
        dx = x[self.j] - x[self.i]
        return self.seg(self.w[:, None, None] * dx[:, :, None] * self.g[:, None, :])

    def stencil_vjp(self, D_bar):
        vec = np.einsum("pab,pb->pa", D_bar[self.i], self._wg)
        return self.scatter(vec)

    def moment_matrix(self, x):
        dx = x[self.j] - x[self.i]
        return self.seg(self.mw[:, None, None] * dx[:, :, None] * self.dX[:, None, :])

    def moment_vjp(self, A_bar):
        vec = self.mw[:, None] * np.einsum("pab,pb->pa", A_bar[self.i], self.dX)
        return self.scatter(vec)

    def deformation(self, D, R):
        # grouped so the identity map gives F = I exactly
        return EYE + (_T(D) @ R - _T(self.D0))


@dataclass
class Rotations:
    """Polar factors R_i of the moment matrices, with data for differentiation."""

    R: np.ndarray
    S: np.ndarray
    valid: np.ndarray


def extract_rotation(body: SoftBody, x, previous=None, rank_tol=1e-8) -> Rotations:
    """R_i from the polar decomposition of A_i = sum m_j W_ij (x_j - x_i)(X_j - X_i)^T.

    The sign of the smallest singular direction is flipped when needed so that
    det R = +1. Particles with fewer than two independent directions keep the
    previous rotation (identity at the start).
    """
    A = body.moment_matrix(x)
    U, s, Vt = np.linalg.svd(A)
    flip = np.linalg.det(U @ Vt) < 0
    U[flip, :, 2] *= -1.0
    s = s.copy()
    s[flip, 2] *= -1.0
    R = U @ Vt
    S = _T(Vt) @ (s[:, :, None] * Vt)
    valid = s[:, 1] > rank_tol * np.maximum(np.abs(s[:, 0]), 1e-300)
    if not np.all(valid):
        prev = np.broadcast_to(EYE, R.shape) if previous is None else previous
        R = np.where(valid[:, None, None], R, prev)
    return Rotations(R, S, valid)


def polar_vjp(rot: Rotations, R_bar):
    """Cotangent of A from a cotangent of R = polar(A)."""
    R, S = rot.R, rot.S
    w_bar = axial(_T(R) @ R_bar - _T(R_bar) @ R)
    B = np.trace(S, axis1=-2, axis2=-1)[:, None, None] * EYE - S
    B[~rot.valid] = EYE
    t = np.linalg.solve(B, w_bar[..., None])[..., 0]
    A_bar = R @ skew(t)
    A_bar[~rot.valid] = 0.0
    return A_bar


def polar_jvp(rot: Rotations, dA):
    R, S = rot.R, rot.S
    M = _T(R) @ dA
    B = np.trace(S, axis1=-2, axis2=-1)[:, None, None] * EYE - S
    B[~rot.valid] = EYE
    w = np.linalg.solve(B, axial(M - _T(M))[..., None])[..., 0]
    dR = R @ skew(w)
    dR[~rot.valid] = 0.0
    return dR


# ---------------------------------------------------------------------------
# potential energy of the body

class SoftPotential:
    """Elastic + actuation + ground-penalty energy of a body for fixed rotations.

    ``pressure`` is the current chamber pressure in Pa; the actuation term is
    ``sum_i p * w_i * det(F_i) * V_i``.
    """

    def __init__(self, body: SoftBody, material: SoftMaterial, strain_kind="green", ground=None,
                 pressure=0.0):
        self.body = body
        self.material = material
        self.kind = strain_kind
        self.ground = ground
        self.pressure = float(pressure)
        self.act = np.zeros(body.n)
        if material.chamber is not None and self.pressure != 0.0:
            self.act = self.pressure * material.chamber * body.volumes

    @property
    def actuated(self):
        return bool(np.any(self.act != 0.0))

    def with_pressure(self, pressure):
        return SoftPotential(self.body, self.material, self.kind, self.ground, pressure)

    def deformation(self, x, R):
        return self.body.deformation(self.body.stencil(x), R)

    # per-particle response T = vol*P + a*cof(F)
    def _response(self, F):
        b, m = self.body, self.material
        psi, P = stvk(F, m.mu, m.lam, self.kind)
        T = b.vol[:, None, None] * P
        e_act = 0.0
        if self.actuated:
            det, cof = cofactor(F)
            bad = np.flatnonzero((det <= 0) & (self.act != 0))
            if len(bad):
                raise InvertedElementError(bad[0])
            T = T + self.act[:, None, None] * cof
            e_act = float(np.sum(self.act * det))
        return psi, P, T, e_act

    def _response_jvp(self, F, dF):
        b, m = self.body, self.material
        dT = b.vol[:, None, None] * stvk_jvp(F, dF, m.mu, m.lam, self.kind)
        if self.actuated:
            dT = dT + self.act[:, None, None] * cofactor_jvp(F, dF)
        return dT

    def _penalty(self, x):
        g = self.ground
        if g is None or g.stiffness == 0:
            return 0.0, np.zeros_like(x), np.zeros(len(x))
        gap = np.maximum(g.clearance - g.distance(x), 0.0)
        vol = self.body.vol
        e = float(np.sum(vol * 0.5 * g.stiffness * gap ** 2))
        grad = -(vol * g.stiffness * gap)[:, None] * g.normal
        curv = vol * g.stiffness * (gap > 0)
        return e, grad, curv

    def evaluate(self, x, R):
        """Energy report and gradient with respect to x (rotations frozen)."""
        F = self.deformation(x, R)
        psi, P, T, e_act = self._response(F)
        grad = self.body.stencil_vjp(R @ _T(T))
        e_pen, g_pen, _ = self._penalty(x)
        report = EnergyReport(float(np.sum(self.body.vol * psi)), e_act, e_pen, psi, P)
        return report, grad + g_pen

    def energy(self, x, R):
        return self.evaluate(x, R)[0].total

    def hvp(self, x, R, u):
        """Hessian-vector product of the frozen-rotation energy."""
        F = self.deformation(x, R)
        dF = _T(self.body.stencil(u)) @ R
        dT = self._response_jvp(F, dF)
        out = self.body.stencil_vjp(R @ _T(dT))
        _, _, curv = self._penalty(x)
        if self.ground is not None:
            n = self.ground.normal
            out = out + (curv * (u @ n))[:, None] * n
        return out

    def rotation_vjp(self, x, R, z):
        """Cotangent of R for phi(R) = grad(x; R) . z."""
        b = self.body
        F = self.deformation(x, R)
        Dz = b.stencil(z)
        dFz = _T(Dz) @ R
        _, _, T, _ = self._response(F)
        Q = self._response_jvp(F, dFz)
        return Dz @ T + b.stencil(x) @ Q

    def param_vjp(self, x, R, z):
        """Cotangents (mu, lambda, chamber) of grad(x; R) . z."""
        b = self.body
        F = self.deformation(x, R)
        dFz = _T(b.stencil(z)) @ R
        dmu, dlam = stvk_param_derivs(F, self.kind)
        mu_bar = b.vol * np.sum(dmu * dFz, axis=(-2, -1))
        lam_bar = b.vol * np.sum(dlam * dFz, axis=(-2, -1))
        ch_bar = None
        if self.material.chamber is not None:
            _, cof = cofactor(F)
            ch_bar = self.pressure * b.volumes * np.sum(cof * dFz, axis=(-2, -1))
        return mu_bar, lam_bar, ch_bar

    def energy_param_vjp(self, x, R, e_bar=1.0):
        """Cotangents (mu, lambda, chamber) of the energy itself."""
        b = self.body
        F = self.deformation(x, R)
        eps = strain(F, self.kind)
        tr = np.trace(eps, axis1=-2, axis2=-1)
        mu_bar = e_bar * b.vol * np.sum(eps * eps, axis=(-2, -1))
        lam_bar = e_bar * b.vol * 0.5 * tr ** 2
        ch_bar = None
        if self.material.chamber is not None:
            ch_bar = e_bar * self.pressure * b.volumes * np.linalg.det(F)
        return mu_bar, lam_bar, ch_bar

    # -- assembled second derivatives -------------------------------------------------
    def stencil_matrix(self, R):
        """Sparse B with vec(F) = B x + const for frozen R (rows 9i+3a+c, cols 3k+b)."""
        b = self.body
        coef = b._wg[:, :, None, None] * R[b.i][:, None, :, :]  # (p, a, b, c)
        coef = np.transpose(coef, (0, 1, 3, 2))                  # (p, a, c, b)
        a_idx, c_idx, b_idx = np.meshgrid(np.arange(3), np.arange(3), np.arange(3), indexing="ij")
        rows = 9 * b.i[:, None, None, None] + 3 * a_idx + c_idx
        cols_j = 3 * b.j[:, None, None, None] + b_idx
        cols_i = 3 * b.i[:, None, None, None] + b_idx
        rows = np.broadcast_to(rows, coef.shape).ravel()
        data = np.concatenate([coef.ravel(), -coef.ravel()])
        cols = np.concatenate([np.broadcast_to(cols_j, coef.shape).ravel(),
                               np.broadcast_to(cols_i, coef.shape).ravel()])
        rows = np.concatenate([rows, rows])
        return sparse.csr_matrix((data, (rows, cols)), shape=(9 * b.n, 3 * b.n))

    def tangent_blocks(self, x, R, project=False):
        """Per-particle 9x9 second derivative of the particle energy in F."""
        F = self.deformation(x, R)
        n = self.body.n
        C = np.empty((n, 9, 9))
        for k in range(9):
            E = np.zeros((n, 3, 3))
            E[:, k // 3, k % 3] = 1.0
            C[:, :, k] = self._response_jvp(F, E).reshape(n, 9)
        C = 0.5 * (C + np.swapaxes(C, 1, 2))
        if project:
            lam, V = np.linalg.eigh(C)
            C = (V * np.maximum(lam, 0.0)[:, None, :]) @ np.swapaxes(V, 1, 2)
        return C

    def hessian(self, x, R, project=False, B=None):
        n = self.body.n
        B = self.stencil_matrix(R) if B is None else B
        C = self.tangent_blocks(x, R, project)
        Cs = _block_diag(C)
        H = (B.T @ Cs @ B).tocsr()
        _, _, curv = self._penalty(x)
        if self.ground is not None and np.any(curv):
            nn = np.outer(self.ground.normal, self.ground.normal)
            H = H + _block_diag(curv[:, None, None] * nn)
        return H


def _block_diag(blocks):
    n, k, _ = blocks.shape
    base = k * np.arange(n)[:, None, None]
    rows = np.broadcast_to(base + np.arange(k)[None, :, None], blocks.shape)
    cols = np.broadcast_to(base + np.arange(k)[None, None, :], blocks.shape)
    return sparse.csr_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(n * k, n * k))


def rigid_motion(x, Q, t):
    return x @ np.asarray(Q).T + np.asarray(t)
