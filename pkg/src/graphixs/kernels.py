"""Splat primitives in 3D and on the image plane.

Everything here is vectorized over components; the single-component helpers
(`eval_kernel_3d`, `project_component`, ...) wrap the batched code paths.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (SCALE_FLOOR, CameraModel, Component, ComponentSet, KernelKind,
                   covariance, logistic, quat_to_rotmat)
from .dynamics import mean_at_time, mean_at_time_batch, mean_at_time_vjp

BLUR_FLOOR = 0.3
ALPHA_CUTOFF = 1.0 / 255.0
NEAR_PLANE = 0.01

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


class DegenerateCovariance(ValueError):
    pass


# ---------------------------------------------------------------------------
# kernel profiles as functions of the squared Mahalanobis distance

def kernel_profile(kind: KernelKind, m, nu=None, dim: int = 3):
    """Unnormalized kernel value with peak 1 at m = 0."""
    kind = KernelKind.parse(kind)
    m = np.asarray(m, dtype=float)
    if kind is KernelKind.GAUSSIAN:
        return np.exp(-0.5 * m)
    nu = np.asarray(nu, dtype=float)
    return np.exp(-0.5 * (nu + dim) * np.log1p(m / nu))


def kernel_profile_grads(kind: KernelKind, m, nu=None, dim: int = 3):
    """(K, dK/dm, dK/dnu); dK/dnu is zero for the Gaussian."""
    kind = KernelKind.parse(kind)
    m = np.asarray(m, dtype=float)
    if kind is KernelKind.GAUSSIAN:
        k = np.exp(-0.5 * m)
        return k, -0.5 * k, np.zeros_like(k)
    nu = np.asarray(nu, dtype=float)
    r = m / nu
    lg = np.log1p(r)
    k = np.exp(-0.5 * (nu + dim) * lg)
    dk_dm = -0.5 * (nu + dim) / nu * k / (1.0 + r)
    dk_dnu = k * (-0.5 * lg + 0.5 * (nu + dim) * (r / nu) / (1.0 + r))
    return k, dk_dm, dk_dnu


def cutoff_mahalanobis(kind: KernelKind, opacity, nu=None, cutoff: float = ALPHA_CUTOFF, dim: int = 2):
    """Largest m with opacity * K(m) >= cutoff (negative when the splat is never visible)."""
    kind = KernelKind.parse(kind)
    opacity = np.asarray(opacity, dtype=float)
    with np.errstate(divide="ignore"):
        ratio = np.log(opacity / cutoff)
    if kind is KernelKind.GAUSSIAN:
        return 2.0 * ratio
    nu = np.asarray(nu, dtype=float)
    return nu * np.expm1(2.0 * ratio / (nu + dim))


# ---------------------------------------------------------------------------
# 3D evaluation

def mahalanobis_sq(x, mu, rot, log_scale) -> float:
    """(x - mu)^T Sigma^-1 (x - mu) for the factored covariance."""
    log_scale = np.asarray(log_scale, dtype=float)
    if np.any(np.exp(log_scale) < SCALE_FLOOR):
        raise DegenerateCovariance("scale below floor: component is invalid")
    R = quat_to_rotmat(rot)
    # rotate into the principal frame, then whiten per axis
    local = R.T @ (np.asarray(x, dtype=float) - np.asarray(mu, dtype=float))
    return float(np.sum((local * np.exp(-log_scale)) ** 2))


def eval_kernel_3d(kind, x, c: Component, m: Optional[float] = None) -> float:
    kind = KernelKind.parse(kind)
    if m is None:
        m = mahalanobis_sq(x, c.mu, c.rot, c.log_scale)
    return float(kernel_profile(kind, m, c.nu, dim=3))


def temporal_opacity(c: Component, t: float) -> float:
    z = (t - c.g) / c.u
    return float(logistic(c.opacity_logit) * math.exp(-0.5 * z * z))


def temporal_opacity_batch(cs: ComponentSet, t: float) -> np.ndarray:
    z = (t - cs.g) / cs.u
    return cs.opacity * np.exp(-0.5 * z * z)


# ---------------------------------------------------------------------------
# spherical harmonics

def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values, shape (n, (degree+1)^2), for unit directions (n, 3)."""
    dirs = np.atleast_2d(dirs)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = [np.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
                SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    if degree >= 3:
        out += [SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z,
                SH_C3[2] * y * (4 * zz - xx - yy), SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                SH_C3[4] * x * (4 * zz - xx - yy), SH_C3[5] * z * (xx - yy),
                SH_C3[6] * x * (xx - 3 * yy)]
    return np.stack(out, axis=1)


def sh_basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d basis / d (x, y, z) treating the direction components as free, shape (n, K, 3)."""
    dirs = np.atleast_2d(dirs)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        c = SH_C1
        rows += [(zero, zero - c, zero), (zero, zero, zero + c), (zero - c, zero, zero)]
    if degree >= 2:
        c = SH_C2
        rows += [(c[0] * y, c[0] * x, zero),
                 (zero, c[1] * z, c[1] * y),
                 (-2 * c[2] * x, -2 * c[2] * y, 4 * c[2] * z),
                 (c[3] * z, zero, c[3] * x),
                 (2 * c[4] * x, -2 * c[4] * y, zero)]
    if degree >= 3:
        c = SH_C3
        xx, yy, zz = x * x, y * y, z * z
        rows += [(c[0] * 6 * x * y, c[0] * (3 * xx - 3 * yy), zero),
                 (c[1] * y * z, c[1] * x * z, c[1] * x * y),
                 (c[2] * -2 * x * y, c[2] * (4 * zz - xx - 3 * yy), c[2] * 8 * y * z),
                 (c[3] * -6 * x * z, c[3] * -6 * y * z, c[3] * (6 * zz - 3 * xx - 3 * yy)),
                 (c[4] * (4 * zz - 3 * xx - yy), c[4] * -2 * x * y, c[4] * 8 * x * z),
                 (c[5] * 2 * x * z, c[5] * -2 * y * z, c[5] * (xx - yy)),
                 (c[6] * (3 * xx - 3 * yy), c[6] * -6 * x * y, zero)]
    return np.stack([np.stack(r, axis=1) for r in rows], axis=1)


def sh_color(c: Component, view_dir) -> np.ndarray:
    sh = np.asarray(c.sh, dtype=float)
    degree = int(round(math.sqrt(sh.shape[0]))) - 1
    basis = sh_basis(np.asarray(view_dir, dtype=float)[None], degree)[0]
    return np.clip(0.5 + basis @ sh, 0.0, 1.0)


# ---------------------------------------------------------------------------
# projection

@dataclass
class Splat2D:
    center: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    eff_opacity: float
    component_index: int
    nu: float = 1e6


@dataclass
class Projection:
    """Batched projection of a component set into one camera at one time.

    ``visible`` marks components that survive depth, opacity and image-overlap
    culling.  The remaining arrays hold per-component values (for all N) that
    the backward pass needs.
    """
    t: float
    mean_t: np.ndarray
    p_cam: np.ndarray
    depth: np.ndarray
    center: np.ndarray
    cov3d: np.ndarray
    T: np.ndarray          # J @ W, shape (N, 2, 3)
    cov2d: np.ndarray
    conic: np.ndarray      # inverse of cov2d, (N, 2, 2)
    view_vec: np.ndarray   # mean_t - camera center
    view_dir: np.ndarray
    sh_raw: np.ndarray     # 0.5 + sum before clamping, (N, 3)
    color: np.ndarray
    opacity: np.ndarray    # temporal (effective) opacity
    m_cut: np.ndarray      # Mahalanobis^2 radius of the visible footprint
    visible: np.ndarray
    in_front: np.ndarray


def projection_jacobian(p_cam: np.ndarray, cam: CameraModel) -> np.ndarray:
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    J = np.zeros((p_cam.shape[0], 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / (z * z)
    return J


def ellipse_rect_min_m(center, conic, x0, x1, y0, y1):
    """Minimum of (p - c)^T A (p - c) over the rectangle [x0,x1] x [y0,y1].

    Vectorized over leading axes of ``center`` (..., 2) and ``conic`` (..., 2, 2).
    """
    cx, cy = center[..., 0], center[..., 1]
    a, b, c = conic[..., 0, 0], conic[..., 0, 1], conic[..., 1, 1]
    inside = (cx >= x0) & (cx <= x1) & (cy >= y0) & (cy <= y1)
    best = np.full(cx.shape, np.inf)
    for xe in (x0, x1):
        dx = xe - cx
        dy = np.clip(-b * dx / c, y0 - cy, y1 - cy)
        best = np.minimum(best, a * dx * dx + 2 * b * dx * dy + c * dy * dy)
    for ye in (y0, y1):
        dy = ye - cy
        dx = np.clip(-b * dy / a, x0 - cx, x1 - cx)
        best = np.minimum(best, a * dx * dx + 2 * b * dx * dy + c * dy * dy)
    return np.where(inside, 0.0, best)


def project(cs: ComponentSet, cam: CameraModel, t: float,
            near_plane: float = NEAR_PLANE, alpha_cutoff: float = ALPHA_CUTOFF,
            mean_offset: Optional[np.ndarray] = None) -> Projection:
    """Project every component; ``mean_offset`` adds (e.g. Brownian) displacements to mu(t)."""
    mean_t = mean_at_time_batch(cs, t)
    if mean_offset is not None:
        mean_t = mean_t + mean_offset
    p_cam = mean_t @ cam.R.T + cam.t
    depth = p_cam[:, 2]
    in_front = depth > near_plane
    safe = p_cam.copy()
    safe[~in_front, 2] = 1.0
    z = safe[:, 2]
    center = np.stack([cam.fx * safe[:, 0] / z + cam.cx, cam.fy * safe[:, 1] / z + cam.cy], axis=1)
    cov3d = covariance(cs.rot, cs.log_scale)
    T = projection_jacobian(safe, cam) @ cam.R
    cov2d = T @ cov3d @ np.transpose(T, (0, 2, 1))
    cov2d[:, 0, 0] += BLUR_FLOOR
    cov2d[:, 1, 1] += BLUR_FLOOR
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / det
    conic[:, 1, 1] = cov2d[:, 0, 0] / det
    conic[:, 0, 1] = conic[:, 1, 0] = -cov2d[:, 0, 1] / det

    view_vec = mean_t - cam.center
    view_dir = view_vec / np.linalg.norm(view_vec, axis=1, keepdims=True)
    sh_raw = 0.5 + np.einsum("nk,nkc->nc", sh_basis(view_dir, cs.sh_degree), cs.sh)
    color = np.clip(sh_raw, 0.0, 1.0)

    opacity = temporal_opacity_batch(cs, t)
    m_cut = cutoff_mahalanobis(cs.kernel_kind, opacity, cs.nu, alpha_cutoff, dim=2)
    visible = in_front & (opacity >= alpha_cutoff)
    # pixel sample points are pixel centers
    m_min = ellipse_rect_min_m(center, conic, 0.5, cam.width - 0.5, 0.5, cam.height - 0.5)
    visible &= m_min <= m_cut * (1 + 1e-9) + 1e-12
    return Projection(t, mean_t, p_cam, depth, center, cov3d, T, cov2d, conic, view_vec,
                      view_dir, sh_raw, color, opacity, m_cut, visible, in_front)


def project_component(c: Component, cam: CameraModel, t: float, kind=KernelKind.GAUSSIAN,
                      near_plane: float = NEAR_PLANE, alpha_cutoff: float = ALPHA_CUTOFF,
                      index: int = 0) -> Optional[Splat2D]:
    """Project one component; returns None when it is culled."""
    degree = int(round(math.sqrt(np.shape(c.sh)[0]))) - 1
    cs = ComponentSet.from_components([c], kernel_kind=kind, sh_degree=degree)
    p = project(cs, cam, t, near_plane, alpha_cutoff)
    if not p.visible[0]:
        return None
    return Splat2D(p.center[0], p.cov2d[0], float(p.depth[0]), p.color[0],
                   float(p.opacity[0]), index, float(c.nu))


def eval_splat_2d(s: Splat2D, pixel, kind=KernelKind.GAUSSIAN, nu: Optional[float] = None) -> float:
    kind = KernelKind.parse(kind)
    d = np.asarray(pixel, dtype=float) - s.center
    m = float(d @ np.linalg.solve(s.cov2d, d))
    return float(kernel_profile(kind, m, s.nu if nu is None else nu, dim=2))


# ---------------------------------------------------------------------------
# vector-Jacobian products

def rotmat_vjp(q: np.ndarray, gR: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. raw quaternions given dL/dR for R = R(q / |q|)."""
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qh = q / norm
    w, x, y, z = qh[:, 0], qh[:, 1], qh[:, 2], qh[:, 3]
    g = gR
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
              - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    gq = np.stack([gw, gx, gy, gz], axis=1)
    return (gq - qh * np.sum(qh * gq, axis=1, keepdims=True)) / norm


def covariance_vjp(rot: np.ndarray, log_scale: np.ndarray, g_cov: np.ndarray):
    """Pull dL/dSigma (full matrices) back to (rot, log_scale)."""
    g_cov = 0.5 * (g_cov + np.transpose(g_cov, (0, 2, 1)))
    R = quat_to_rotmat(rot)
    s = np.exp(log_scale)
    M = R * s[:, None, :]
    gM = 2.0 * g_cov @ M
    g_s = np.sum(gM * R, axis=1)
    gR = gM * s[:, None, :]
    return rotmat_vjp(rot, gR), g_s * s


def projection_vjp(cs: ComponentSet, cam: CameraModel, proj: Projection, *,
                   g_center=None, g_cov2d=None, g_color=None, g_opacity=None,
                   g_mean=None) -> dict[str, np.ndarray]:
    """Chain screen-space gradients back to component parameters.

    All inputs are per-component arrays over the full set (zeros for culled
    components).  Returns a dict keyed by parameter name.
    """
    n = len(cs)
    out = {}
    g_mean_t = np.zeros((n, 3)) if g_mean is None else np.array(g_mean, dtype=float)
    g_pcam = np.zeros((n, 3))
    x, y = proj.p_cam[:, 0], proj.p_cam[:, 1]
    z = np.where(proj.in_front, proj.p_cam[:, 2], 1.0)
    if g_center is not None:
        g_pcam[:, 0] += g_center[:, 0] * cam.fx / z
        g_pcam[:, 1] += g_center[:, 1] * cam.fy / z
        g_pcam[:, 2] -= (g_center[:, 0] * cam.fx * x + g_center[:, 1] * cam.fy * y) / (z * z)
    if g_cov2d is not None:
        G2 = 0.5 * (g_cov2d + np.transpose(g_cov2d, (0, 2, 1)))
        T = proj.T
        g_cov3d = np.transpose(T, (0, 2, 1)) @ G2 @ T
        gT = 2.0 * G2 @ T @ proj.cov3d
        gJ = gT @ cam.R.T
        z2, z3 = z * z, z * z * z
        g_pcam[:, 0] += gJ[:, 0, 2] * (-cam.fx / z2)
        g_pcam[:, 1] += gJ[:, 1, 2] * (-cam.fy / z2)
        g_pcam[:, 2] += (gJ[:, 0, 0] * (-cam.fx / z2) + gJ[:, 0, 2] * (2 * cam.fx * x / z3)
                         + gJ[:, 1, 1] * (-cam.fy / z2) + gJ[:, 1, 2] * (2 * cam.fy * y / z3))
        g_rot, g_ls = covariance_vjp(cs.rot, cs.log_scale, g_cov3d)
        out["rot"] = g_rot
        out["log_scale"] = g_ls
    g_mean_t += g_pcam @ cam.R
    if g_color is not None:
        g_raw = np.where((proj.sh_raw > 0.0) & (proj.sh_raw < 1.0), g_color, 0.0)
        basis = sh_basis(proj.view_dir, cs.sh_degree)
        out["sh"] = basis[:, :, None] * g_raw[:, None, :]
        jac = sh_basis_jacobian(proj.view_dir, cs.sh_degree)  # (n, K, 3)
        g_dir = np.einsum("nkd,nkc,nc->nd", jac, cs.sh, g_raw)
        norm = np.linalg.norm(proj.view_vec, axis=1, keepdims=True)
        d = proj.view_dir
        g_mean_t += (g_dir - d * np.sum(d * g_dir, axis=1, keepdims=True)) / norm
    if g_opacity is not None:
        out.update(temporal_opacity_vjp(cs, proj.t, g_opacity))
    dyn = mean_at_time_vjp(cs, proj.t, g_mean_t)
    out["g"] = out.get("g", 0.0) + dyn.pop("g")
    out.update(dyn)
    return out


def temporal_opacity_vjp(cs: ComponentSet, t: float, g_opacity: np.ndarray) -> dict[str, np.ndarray]:
    o = cs.opacity
    zt = (t - cs.g) / cs.u
    eff = o * np.exp(-0.5 * zt * zt)
    return {"opacity_logit": g_opacity * eff * (1.0 - o),
            "g": g_opacity * eff * zt / cs.u,
            "u": g_opacity * eff * zt * zt / cs.u}
