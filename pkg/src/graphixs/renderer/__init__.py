"""Ray casting, culling, per-pixel intersection, compositing and the backward pass.

The tile rasterizer runs on a compiled core when it is importable and on a
numpy implementation otherwise.  Set ``GRAPHIXS_PURE_PYTHON=1`` to force the
fallback, and ``GRAPHIXS_NUM_THREADS`` to choose the thread count (0 or 1
means single-threaded; results are identical for every setting).
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..core import FIELDS, CameraModel, ComponentSet, KernelKind
from ..kernels import (ALPHA_CUTOFF, NEAR_PLANE, Projection, Splat2D, kernel_profile, project,
                       projection_vjp)
from . import _raster_py

try:
    if os.environ.get("GRAPHIXS_PURE_PYTHON", "0") not in ("", "0"):
        raise ImportError("pure python backend requested")
    from . import _raster as _compiled
except ImportError:
    _compiled = None

_backend = _compiled if _compiled is not None else _raster_py
BACKEND = "compiled" if _compiled is not None else "python"

T_MIN = 1e-4
ALPHA_MAX = 0.999


def set_backend(name: str) -> None:
    """Switch between the "compiled" and "python" rasterizer backends."""
    global _backend, BACKEND
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled rasterizer is not available")
        _backend = _compiled
    elif name == "python":
        _backend = _raster_py
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name


def num_threads() -> int:
    n = int(os.environ.get("GRAPHIXS_NUM_THREADS", "0") or 0)
    return max(n, 1)


@dataclass
class RenderConfig:
    near_plane: float = NEAR_PLANE
    alpha_cutoff: float = ALPHA_CUTOFF
    background: tuple = (0.0, 0.0, 0.0)
    tile_size: int = 16

    def to_dict(self) -> dict:
        return {"near_plane": self.near_plane, "alpha_cutoff": self.alpha_cutoff,
                "background": list(self.background), "tile_size": self.tile_size}

    @classmethod
    def from_dict(cls, d: dict) -> "RenderConfig":
        return cls(near_plane=d.get("near_plane", NEAR_PLANE),
                   alpha_cutoff=d.get("alpha_cutoff", ALPHA_CUTOFF),
                   background=tuple(d.get("background", (0.0, 0.0, 0.0))),
                   tile_size=int(d.get("tile_size", 16)))


class GradientRecord:
    """Per-component partial derivatives, one array per component field."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = arrays

    @classmethod
    def zeros(cls, cs: ComponentSet) -> "GradientRecord":
        return cls({name: np.zeros_like(getattr(cs, name)) for name in FIELDS})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def add(self, partial: dict, scale: float = 1.0) -> "GradientRecord":
        for name, g in partial.items():
            self.arrays[name] = self.arrays[name] + scale * np.asarray(g, dtype=float)
        return self

    def __iadd__(self, other: "GradientRecord"):
        return self.add(other.arrays)

    def copy(self) -> "GradientRecord":
        return GradientRecord({k: v.copy() for k, v in self.arrays.items()})

    def check_finite(self) -> None:
        for name in FIELDS:
            bad = ~np.isfinite(self.arrays[name].reshape(len(self.arrays[name]), -1)).all(axis=1)
            if bad.any():
                raise FloatingPointError(
                    f"non-finite gradient in field {name!r} for components {np.flatnonzero(bad).tolist()}")

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[name].ravel() for name in FIELDS])


# ---------------------------------------------------------------------------
# rays

@dataclass
class Ray:
    origin: np.ndarray
    dir: np.ndarray
    camera_id: int
    pixel: tuple
    t: float


def cast_ray(cam: CameraModel, pixel, t: float) -> Ray:
    """Ray through the center of integer pixel ``(col, row)``."""
    px, py = float(pixel[0]), float(pixel[1])
    if not (0 <= px <= cam.width - 1 and 0 <= py <= cam.height - 1):
        raise ValueError(f"pixel {pixel} outside {cam.width}x{cam.height} image")
    d_cam = np.array([(px + 0.5 - cam.cx) / cam.fx, (py + 0.5 - cam.cy) / cam.fy, 1.0])
    d = cam.R.T @ d_cam
    return Ray(cam.center, d / np.linalg.norm(d), cam.id, (px, py), t)


def cast_rays(cam: CameraModel, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized cast_ray: (origin, unit directions (n, 3))."""
    pixels = np.asarray(pixels, dtype=float)
    d_cam = np.stack([(pixels[:, 0] + 0.5 - cam.cx) / cam.fx, (pixels[:, 1] + 0.5 - cam.cy) / cam.fy,
                      np.ones(len(pixels))], axis=1)
    d = d_cam @ cam.R
    return cam.center, d / np.linalg.norm(d, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# per-image and per-pixel subsets

def _front_to_back(depth: np.ndarray, index: np.ndarray) -> np.ndarray:
    return np.lexsort((index, depth))


def cull_per_image(cs: ComponentSet, cam: CameraModel, t: float,
                   cfg: Optional[RenderConfig] = None, proj: Optional[Projection] = None) -> list[Splat2D]:
    cfg = cfg or RenderConfig()
    if proj is None:
        proj = project(cs, cam, t, cfg.near_plane, cfg.alpha_cutoff)
    idx = np.flatnonzero(proj.visible)
    return [Splat2D(proj.center[i], proj.cov2d[i], float(proj.depth[i]), proj.color[i],
                    float(proj.opacity[i]), int(i), float(cs.nu[i])) for i in idx]


def intersect_per_pixel(splats: Sequence[Splat2D], pixel, kind=KernelKind.GAUSSIAN,
                        alpha_cutoff: float = ALPHA_CUTOFF) -> list[tuple[Splat2D, float]]:
    """Splats whose opacity-weighted response at ``pixel`` reaches the cutoff, front to back.

    ``pixel`` is a continuous image-plane position (integer pixel p is sampled at p + 0.5).
    Returns (splat, response) pairs.
    """
    kind = KernelKind.parse(kind)
    hits = []
    p = np.asarray(pixel, dtype=float)
    for s in splats:
        d = p - s.center
        m = float(d @ np.linalg.solve(s.cov2d, d))
        resp = float(kernel_profile(kind, m, s.nu, dim=2))
        if s.eff_opacity * resp >= alpha_cutoff:
            hits.append((s, resp))
    hits.sort(key=lambda h: (h[0].depth, h[0].component_index))
    return hits


def composite(ordered) -> tuple[np.ndarray, float]:
    """Front-to-back blend of (response, color, eff_opacity) triples.

    Returns (rgb, transmittance); the background is not added.
    """
    rgb = np.zeros(3)
    T = 1.0
    for resp, color, opacity in ordered:
        alpha = min(opacity * resp, ALPHA_MAX)
        rgb = rgb + np.asarray(color, dtype=float) * (alpha * T)
        T *= 1.0 - alpha
        if T < T_MIN:
            break
    return rgb, T


# ---------------------------------------------------------------------------
# images

@dataclass
class _Packed:
    proj: Projection
    order: np.ndarray
    centers: np.ndarray
    conics: np.ndarray
    opac: np.ndarray
    colors: np.ndarray
    nus: np.ndarray
    offsets: np.ndarray
    items: np.ndarray


def _pack(cs: ComponentSet, cam: CameraModel, t: float, cfg: RenderConfig,
          mean_offset: Optional[np.ndarray] = None) -> _Packed:
    proj = project(cs, cam, t, cfg.near_plane, cfg.alpha_cutoff, mean_offset)
    vis = np.flatnonzero(proj.visible)
    order = vis[_front_to_back(proj.depth[vis], vis)]
    centers = np.ascontiguousarray(proj.center[order])
    conics = np.ascontiguousarray(np.stack([proj.conic[order, 0, 0], proj.conic[order, 0, 1],
                                            proj.conic[order, 1, 1]], axis=1).reshape(-1, 3))
    m_cut = np.ascontiguousarray(proj.m_cut[order])
    radii = np.sqrt(np.maximum(m_cut, 0.0)[:, None]
                    * np.stack([proj.cov2d[order, 0, 0], proj.cov2d[order, 1, 1]], axis=1))
    radii = np.ascontiguousarray(radii.reshape(-1, 2))
    offsets, items = _backend.bin_splats(centers, conics, m_cut, radii,
                                         cam.width, cam.height, cfg.tile_size)
    return _Packed(proj, order, centers, conics,
                   np.ascontiguousarray(proj.opacity[order]),
                   np.ascontiguousarray(proj.color[order].reshape(-1, 3)),
                   np.ascontiguousarray(cs.nu[order]), np.asarray(offsets), np.asarray(items))


def _kind_code(cs: ComponentSet) -> int:
    return 0 if cs.kernel_kind is KernelKind.GAUSSIAN else 1


def render_image(cs: ComponentSet, cam: CameraModel, t: float, cfg: Optional[RenderConfig] = None,
                 mean_offset: Optional[np.ndarray] = None) -> np.ndarray:
    """Tiled render of the set seen by ``cam`` at time ``t``; (H, W, 3) in [0, 1]."""
    cfg = cfg or RenderConfig()
    pk = _pack(cs, cam, t, cfg, mean_offset)
    image, _ = _backend.rasterize_forward(
        pk.centers, pk.conics, pk.opac, pk.colors, pk.nus, _kind_code(cs), pk.offsets, pk.items,
        cam.width, cam.height, cfg.tile_size, np.asarray(cfg.background, dtype=float),
        cfg.alpha_cutoff, num_threads())
    return image


def render_image_bruteforce(cs: ComponentSet, cam: CameraModel, t: float,
                            cfg: Optional[RenderConfig] = None,
                            mean_offset: Optional[np.ndarray] = None) -> np.ndarray:
    """Reference renderer: every pixel visits every in-front component, no tiling."""
    cfg = cfg or RenderConfig()
    proj = project(cs, cam, t, cfg.near_plane, cfg.alpha_cutoff, mean_offset)
    idx = np.flatnonzero(proj.in_front)
    idx = idx[_front_to_back(proj.depth[idx], idx)]
    bg = np.asarray(cfg.background, dtype=float)
    py, px = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    pts = np.stack([px.ravel() + 0.5, py.ravel() + 0.5], axis=1)
    out = np.empty((pts.shape[0], 3))
    if idx.size == 0:
        out[:] = bg
        return out.reshape(cam.height, cam.width, 3)
    inv = np.linalg.inv(proj.cov2d[idx])
    d = pts[:, None, :] - proj.center[idx][None, :, :]
    m = np.einsum("pni,nij,pnj->pn", d, inv, d)
    resp = kernel_profile(cs.kernel_kind, m, cs.nu[idx], dim=2)
    raw = proj.opacity[idx] * resp
    colors = proj.color[idx]
    for p in range(pts.shape[0]):
        rgb = np.zeros(3)
        T = 1.0
        for k in np.flatnonzero(raw[p] >= cfg.alpha_cutoff):
            alpha = min(raw[p, k], ALPHA_MAX)
            rgb += colors[k] * (alpha * T)
            T *= 1.0 - alpha
            if T < T_MIN:
                break
        out[p] = rgb + T * bg
    return out.reshape(cam.height, cam.width, 3)


def render_backward(cs: ComponentSet, cam: CameraModel, t: float, upstream: np.ndarray,
                    cfg: Optional[RenderConfig] = None,
                    mean_offset: Optional[np.ndarray] = None) -> GradientRecord:
    """Gradient of sum(upstream * render_image(...)) w.r.t. every component field."""
    cfg = cfg or RenderConfig()
    upstream = np.ascontiguousarray(upstream, dtype=float)
    if not np.all(np.isfinite(upstream)):
        raise FloatingPointError("non-finite upstream gradient")
    rec = GradientRecord.zeros(cs)
    pk = _pack(cs, cam, t, cfg, mean_offset)
    if pk.order.size == 0:
        return rec
    raw = _backend.rasterize_backward(
        pk.centers, pk.conics, pk.opac, pk.colors, pk.nus, _kind_code(cs), pk.offsets, pk.items,
        cam.width, cam.height, cfg.tile_size, np.asarray(cfg.background, dtype=float),
        cfg.alpha_cutoff, upstream, num_threads())
    return rec.add(_screen_to_params(cs, cam, pk, raw))


def _screen_to_params(cs: ComponentSet, cam: CameraModel, pk: _Packed, raw: np.ndarray) -> dict:
    n = len(cs)
    order = pk.order
    A = pk.proj.conic[order]
    g_color = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_center = np.zeros((n, 2))
    g_cov2d = np.zeros((n, 2, 2))
    g_nu = np.zeros(n)
    g_color[order] = raw[:, 0:3]
    g_opac[order] = raw[:, 3]
    # m = d^T A d with d = pixel - center
    g_center[order] = -2.0 * np.einsum("nij,nj->ni", A, raw[:, 4:6])
    GA = np.empty((order.size, 2, 2))
    GA[:, 0, 0] = raw[:, 6]
    GA[:, 0, 1] = GA[:, 1, 0] = raw[:, 7]
    GA[:, 1, 1] = raw[:, 8]
    g_cov2d[order] = -A @ GA @ A
    g_nu[order] = raw[:, 9]
    out = projection_vjp(cs, cam, pk.proj, g_center=g_center, g_cov2d=g_cov2d,
                         g_color=g_color, g_opacity=g_opac)
    if cs.kernel_kind is KernelKind.STUDENT_T:
        out["nu"] = g_nu
    return out


def render_with_grad_fn(cs: ComponentSet, cam: CameraModel, t: float, cfg: Optional[RenderConfig] = None,
                        mean_offset: Optional[np.ndarray] = None):
    """Forward render returning the image and a closure computing the backward pass.

    The closure reuses the projection and tile lists of the forward pass.
    """
    cfg = cfg or RenderConfig()
    pk = _pack(cs, cam, t, cfg, mean_offset)
    kind = _kind_code(cs)
    bg = np.asarray(cfg.background, dtype=float)
    image, _ = _backend.rasterize_forward(
        pk.centers, pk.conics, pk.opac, pk.colors, pk.nus, kind, pk.offsets, pk.items,
        cam.width, cam.height, cfg.tile_size, bg, cfg.alpha_cutoff, num_threads())

    def backward(upstream: np.ndarray) -> GradientRecord:
        upstream = np.ascontiguousarray(upstream, dtype=float)
        if not np.all(np.isfinite(upstream)):
            raise FloatingPointError("non-finite upstream gradient")
        rec = GradientRecord.zeros(cs)
        if pk.order.size == 0:
            return rec
        raw = _backend.rasterize_backward(
            pk.centers, pk.conics, pk.opac, pk.colors, pk.nus, kind, pk.offsets, pk.items,
            cam.width, cam.height, cfg.tile_size, bg, cfg.alpha_cutoff, upstream, num_threads())
        return rec.add(_screen_to_params(cs, cam, pk, raw))

    return image, backward
