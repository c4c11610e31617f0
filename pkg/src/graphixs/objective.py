"""Loss terms: image energy, component confidence and the parameter priors."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np
from scipy.special import digamma, gammaln

from .core import ComponentSet, DatasetManifest, FrameObservation, KernelKind, covariance
from .dynamics import mean_at_time_batch
from .kernels import covariance_vjp, kernel_profile, kernel_profile_grads, temporal_opacity_batch, \
    temporal_opacity_vjp
from .dynamics import mean_at_time_vjp
from .renderer import GradientRecord, RenderConfig, cast_rays, render_with_grad_fn

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
CONF_FLOOR = 1e-12


@dataclass
class LossWeights:
    eps_dssim: float = 0.2
    eps_o: float = 0.01
    eps_sigma: float = 0.001
    eps_alpha: float = 0.01
    lambda_sigma: float = 0.001
    lambda_h: float = 0.01
    lambda_op: float = 0.001

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")
        if self.eps_dssim > 1:
            raise ValueError("eps_dssim must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    """Unweighted loss parts; ``total`` is their weighted sum."""
    l1: float = 0.0
    dssim: float = 0.0
    opacity_reg: float = 0.0
    eigen_reg: float = 0.0
    confidence: float = 0.0
    opacity_prior: float = 0.0
    shape_prior: float = 0.0
    motion_prior: float = 0.0
    total: float = 0.0

    def weighted_sum(self, w: LossWeights) -> float:
        return ((1.0 - w.eps_dssim) * self.l1 + w.eps_dssim * self.dssim
                + w.eps_o * self.opacity_reg + w.eps_sigma * self.eigen_reg
                + w.eps_alpha * self.confidence + w.lambda_op * self.opacity_prior
                + w.lambda_sigma * self.shape_prior + w.lambda_h * self.motion_prior)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# SSIM

def _gauss_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-x * x / (2 * sigma * sigma))
    return w / w.sum()


_WIN = _gauss_window()


def _filter_valid(x: np.ndarray, win: np.ndarray = _WIN) -> np.ndarray:
    """Separable 'valid' correlation over the first two axes."""
    k = win.size
    y = np.lib.stride_tricks.sliding_window_view(x, k, axis=0) @ win
    return np.lib.stride_tricks.sliding_window_view(y, k, axis=1) @ win


def _filter_valid_adjoint(y: np.ndarray, win: np.ndarray = _WIN) -> np.ndarray:
    k = win.size
    pad = [(k - 1, k - 1), (k - 1, k - 1)] + [(0, 0)] * (y.ndim - 2)
    return _filter_valid(np.pad(y, pad), win[::-1])


def _ssim_maps(x, y):
    mx, my = _filter_valid(x), _filter_valid(y)
    exx, eyy, exy = _filter_valid(x * x), _filter_valid(y * y), _filter_valid(x * y)
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    num1, den1 = 2 * mx * my + SSIM_C1, mx * mx + my * my + SSIM_C1
    num2, den2 = 2 * cxy + SSIM_C2, vx + vy + SSIM_C2
    return mx, my, num1, den1, num2, den2


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on each side")


def ssim_train(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM (11x11 Gaussian window, sigma 1.5), mean over valid pixels and channels."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    _check_pair(a, b)
    _, _, num1, den1, num2, den2 = _ssim_maps(a, b)
    return float(np.mean(num1 * num2 / (den1 * den2)))


def ssim_train_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """SSIM and its gradient with respect to ``a``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    _check_pair(a, b)
    mx, my, num1, den1, num2, den2 = _ssim_maps(a, b)
    lum, cs = num1 / den1, num2 / den2
    S = lum * cs
    gS = 1.0 / S.size
    d_lum_dmx = (2 * my * den1 - num1 * 2 * mx) / (den1 * den1)
    d_cs_dcxy = 2.0 / den2
    d_cs_dvx = -num2 / (den2 * den2)
    g_mx = gS * (d_lum_dmx * cs + lum * (d_cs_dcxy * -my + d_cs_dvx * -2 * mx))
    g_exx = gS * lum * d_cs_dvx
    g_exy = gS * lum * d_cs_dcxy
    grad = (_filter_valid_adjoint(g_mx) + 2 * a * _filter_valid_adjoint(g_exx)
            + b * _filter_valid_adjoint(g_exy))
    return float(np.mean(S)), grad


# ---------------------------------------------------------------------------
# image energy

def eigen_reg(cs: ComponentSet, t: Optional[float] = None) -> float:
    """Sum of square roots of covariance eigenvalues, i.e. the per-axis scales."""
    return float(np.sum(np.exp(cs.log_scale)))


def image_energy(rendered: np.ndarray, gt: np.ndarray, cs: ComponentSet, t: float,
                 w: LossWeights) -> tuple[float, np.ndarray, dict, LossBreakdown]:
    """Weighted image energy of one frame.

    Returns (energy, d energy / d rendered, direct parameter partials, unweighted parts).
    """
    if rendered.shape != gt.shape:
        raise ValueError(f"image dimensions differ: {rendered.shape} vs {gt.shape}")
    diff = rendered - gt
    l1 = float(np.mean(np.abs(diff)))
    g_img = (1.0 - w.eps_dssim) * np.sign(diff) / diff.size
    dssim = 0.0
    if w.eps_dssim > 0:
        s, g_s = ssim_train_grad(rendered, gt)
        dssim = (1.0 - s) / 2.0
        g_img = g_img - 0.5 * w.eps_dssim * g_s
    opacity = cs.opacity
    scale = np.exp(cs.log_scale)
    parts = LossBreakdown(l1=l1, dssim=dssim, opacity_reg=float(np.sum(opacity)),
                          eigen_reg=float(np.sum(scale)))
    energy = ((1.0 - w.eps_dssim) * l1 + w.eps_dssim * dssim + w.eps_o * parts.opacity_reg
              + w.eps_sigma * parts.eigen_reg)
    direct = {"opacity_logit": w.eps_o * opacity * (1.0 - opacity),
              "log_scale": w.eps_sigma * scale}
    return energy, g_img, direct, parts


# ---------------------------------------------------------------------------
# soft visibility and component confidence

def _ray_min_mahalanobis(origin, dirs, mean_t, precision):
    """Closed-form min over tau >= 0 of the Mahalanobis^2 from origin + tau*dir to each mean.

    Shapes: dirs (R, 3), mean_t (N, 3), precision (N, 3, 3).  Returns (m, w) where
    w (R, N, 3) is the offset from the mean to the closest ray point.
    """
    e = origin[None, :] - mean_t                                  # (N, 3)
    Pe = np.einsum("nij,nj->ni", precision, e)                    # (N, 3)
    Pd = np.einsum("nij,rj->rni", precision, dirs)                # (R, N, 3)
    dPd = np.einsum("rni,ri->rn", Pd, dirs)
    dPe = dirs @ Pe.T                                             # (R, N)
    tau = np.maximum(-dPe / dPd, 0.0)
    w = e[None, :, :] + tau[:, :, None] * dirs[:, None, :]
    m = np.einsum("rni,nij,rnj->rn", w, precision, w)
    return np.maximum(m, 0.0), w


def soft_visibility(ray, cs: ComponentSet, index: int, t: float) -> float:
    """Opacity-weighted kernel response at the ray point closest (in Mahalanobis terms) to the component."""
    sub = ComponentSet(**{k: v[index:index + 1] for k, v in cs.params().items()},
                       kernel_kind=cs.kernel_kind, sh_degree=cs.sh_degree)
    mean_t = mean_at_time_batch(sub, t)
    precision = np.linalg.inv(covariance(sub.rot, sub.log_scale))
    m, _ = _ray_min_mahalanobis(np.asarray(ray.origin, dtype=float),
                                np.asarray(ray.dir, dtype=float)[None], mean_t, precision)
    k = kernel_profile(cs.kernel_kind, m[0, 0], sub.nu[0], dim=3)
    return float(temporal_opacity_batch(sub, t)[0] * k)


def confidence_pixels(cam, grid: int) -> np.ndarray:
    """Stratified grid of continuous pixel coordinates (cell centers) for one camera."""
    gx = (np.arange(grid) + 0.5) * cam.width / grid - 0.5
    gy = (np.arange(grid) + 0.5) * cam.height / grid - 0.5
    yy, xx = np.meshgrid(gy, gx, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def _visibility_views(manifest: DatasetManifest):
    """(camera, time) pairs of every training frame."""
    return [(manifest.camera(f.camera_id), f.timestamp) for f in manifest.training_frames()]


def visibility_totals(cs: ComponentSet, manifest: DatasetManifest, grid: int = 16,
                      g_totals: Optional[np.ndarray] = None, with_partials: bool = False):
    """Per-component soft visibility summed over the stratified ray set.

    With ``g_totals`` (dL/dV per component) also returns the parameter gradient.
    With ``with_partials`` returns (totals, partials) where ``partials`` maps a
    per-component dL/dV onto a GradientRecord without another pass over the rays.
    """
    n = len(cs)
    totals = np.zeros(n)
    want_grad = g_totals is not None or with_partials
    k_by_t: dict[float, np.ndarray] = {}
    gm_by_t: dict[float, np.ndarray] = {}
    g_cov = np.zeros((n, 3, 3))
    g_nu = np.zeros(n)
    student = cs.kernel_kind is KernelKind.STUDENT_T
    precision = np.linalg.inv(covariance(cs.rot, cs.log_scale))
    views: dict[int, list] = {}
    for cam, t in _visibility_views(manifest):
        views.setdefault(cam.id, [cam, []])[1].append(t)
    for cam, times in views.values():
        origin, dirs = cast_rays(cam, confidence_pixels(cam, grid))
        Pd = np.matmul(precision[None], dirs[:, None, :, None])[..., 0]    # (R, N, 3)
        dPd = np.sum(Pd * dirs[:, None, :], axis=2)                       # (R, N)
        for t in times:
            e = origin[None, :] - mean_at_time_batch(cs, t)               # (N, 3)
            Pe = np.matmul(precision, e[:, :, None])[..., 0]
            ePe = np.sum(e * Pe, axis=1)
            dPe = dirs @ Pe.T                                             # (R, N)
            tau = np.maximum(-dPe / dPd, 0.0)
            m = np.maximum(ePe[None] + tau * (2.0 * dPe + tau * dPd), 0.0)
            opac = temporal_opacity_batch(cs, t)
            k, dk_dm, dk_dnu = kernel_profile_grads(cs.kernel_kind, m, cs.nu, dim=3)
            ksum = k.sum(axis=0)
            totals += opac * ksum
            if not want_grad:
                continue
            k_by_t[t] = k_by_t.get(t, 0.0) + ksum
            g_m = opac[None, :] * dk_dm                                   # (R, N)
            # the minimizer is stationary, so only the explicit dependence counts
            Pw = Pe[None] + tau[:, :, None] * Pd                          # (R, N, 3)
            gPw = g_m[:, :, None] * Pw
            gm_by_t[t] = gm_by_t.get(t, 0.0) - 2.0 * gPw.sum(axis=0)
            g_cov -= np.matmul(gPw.transpose(1, 2, 0), Pw.transpose(1, 0, 2))
            if student:
                g_nu += opac * dk_dnu.sum(axis=0)
    if not want_grad:
        return totals

    def partials(gv: np.ndarray) -> GradientRecord:
        rec = GradientRecord.zeros(cs)
        for t, gm in gm_by_t.items():
            rec.add(mean_at_time_vjp(cs, t, gv[:, None] * gm))
        for t, ks in k_by_t.items():
            rec.add(temporal_opacity_vjp(cs, t, gv * ks))
        g_rot, g_ls = covariance_vjp(cs.rot, cs.log_scale, gv[:, None, None] * g_cov)
        rec.add({"rot": g_rot, "log_scale": g_ls, "nu": gv * g_nu})
        return rec

    if with_partials:
        return totals, partials
    return totals, partials(np.asarray(g_totals, dtype=float))


class DegenerateScene(RuntimeError):
    pass


def component_confidence(cs: ComponentSet, manifest: DatasetManifest, grid: int = 16,
                         rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Each component's share of the total soft visibility over all training rays."""
    totals = visibility_totals(cs, manifest, grid)
    denom = totals.sum()
    if not denom > 0:
        raise DegenerateScene("every component is invisible to every training ray")
    return totals / denom


def confidence_energy(conf: np.ndarray, w: LossWeights) -> float:
    conf = np.maximum(np.asarray(conf, dtype=float), CONF_FLOOR)
    return float(w.eps_alpha * -np.mean(np.log(conf)))


def confidence_energy_grad(cs: ComponentSet, manifest: DatasetManifest, w: LossWeights,
                           grid: int = 16) -> tuple[float, np.ndarray, GradientRecord]:
    """(unweighted energy, confidence, gradient of the weighted energy)."""
    totals, partials = visibility_totals(cs, manifest, grid, with_partials=True)
    denom = totals.sum()
    if not denom > 0:
        raise DegenerateScene("every component is invisible to every training ray")
    conf = totals / denom
    n = len(cs)
    raw = float(-np.mean(np.log(np.maximum(conf, CONF_FLOOR))))
    if w.eps_alpha == 0:
        return raw, conf, GradientRecord.zeros(cs)
    safe = np.where(conf > CONF_FLOOR, totals, np.inf)
    g_totals = w.eps_alpha * (-1.0 / (n * safe) + 1.0 / denom)
    return raw, conf, partials(g_totals)


# ---------------------------------------------------------------------------
# priors

def _mass_ratio(kind: KernelKind, nu: np.ndarray):
    """Mass of the 3D Student's-t profile relative to the Gaussian one, and d log(ratio)/d nu."""
    if kind is KernelKind.GAUSSIAN:
        return np.ones_like(nu), np.zeros_like(nu)
    half = nu / 2.0
    log_ratio = 1.5 * np.log(half) + gammaln(half) - gammaln(half + 1.5)
    dlog = 1.5 / nu + 0.5 * digamma(half) - 0.5 * digamma(half + 1.5)
    return np.exp(log_ratio), dlog


def opacity_prior_energy(cs: ComponentSet, times: Sequence[float], w: Optional[LossWeights] = None,
                         with_grad: bool = False):
    """Mean over times and components of o^2 * temporal falloff * kernel mass.

    Returns the unweighted energy (scaled by ``lambda_op`` when ``w`` is given).
    """
    times = list(times)
    lam = 1.0 if w is None else w.lambda_op
    o = cs.opacity
    scale_prod = np.prod(np.exp(cs.log_scale), axis=1)
    ratio, dlog_ratio = _mass_ratio(cs.kernel_kind, cs.nu)
    psi = (2 * math.pi) ** 1.5 * scale_prod * ratio
    n = len(cs)
    total = 0.0
    g_fall = np.zeros(n)
    g_g = np.zeros(n)
    g_u = np.zeros(n)
    for t in times:
        z = (t - cs.g) / cs.u
        fall = np.exp(-0.5 * z * z)
        total += float(np.sum(o * o * fall * psi))
        g_fall += fall
        g_g += fall * z / cs.u
        g_u += fall * z * z / cs.u
    norm = lam / (len(times) * n)
    energy = total * norm
    if not with_grad:
        return energy
    base = o * o * psi * norm
    grads = {"opacity_logit": 2.0 * o * o * (1.0 - o) * psi * g_fall * norm,
             "g": base * g_g,
             "u": base * g_u,
             "log_scale": (base * g_fall)[:, None] * np.ones((1, 3)),
             "nu": base * g_fall * dlog_ratio}
    return energy, grads


def shape_prior_energy(cs: ComponentSet, t: Optional[float] = None, w: Optional[LossWeights] = None,
                       with_grad: bool = False):
    """Mean squared Frobenius distance of each covariance to the mean covariance."""
    lam = 1.0 if w is None else w.lambda_sigma
    cov = covariance(cs.rot, cs.log_scale)
    dev = cov - cov.mean(axis=0, keepdims=True)
    n = len(cs)
    energy = lam * float(np.sum(dev * dev)) / n
    if not with_grad:
        return energy
    g_rot, g_ls = covariance_vjp(cs.rot, cs.log_scale, lam * 2.0 * dev / n)
    return energy, {"rot": g_rot, "log_scale": g_ls}


def motion_prior_energy(cs: ComponentSet, t: Optional[float] = None, w: Optional[LossWeights] = None,
                        with_grad: bool = False):
    """Volume-weighted mean of squared motion derivatives."""
    lam = 1.0 if w is None else w.lambda_h
    vol = np.prod(np.exp(cs.log_scale), axis=1)
    speed = sum(np.sum(getattr(cs, k) ** 2, axis=1) for k in ("v", "a", "j", "s"))
    n = len(cs)
    energy = lam * float(np.sum(vol * speed)) / n
    if not with_grad:
        return energy
    grads = {k: lam * 2.0 * vol[:, None] * getattr(cs, k) / n for k in ("v", "a", "j", "s")}
    grads["log_scale"] = (lam * vol * speed / n)[:, None] * np.ones((1, 3))
    return energy, grads


# ---------------------------------------------------------------------------
# total loss

def total_loss(cs: ComponentSet, manifest: DatasetManifest, batch: Sequence[FrameObservation],
               w: LossWeights, rng: Optional[np.random.Generator] = None, *,
               render_cfg: Optional[RenderConfig] = None,
               mean_offsets: Optional[Sequence[np.ndarray]] = None,
               brownian_scale: float = 0.0,
               confidence: str = "fresh", cached_confidence: float = 0.0,
               confidence_grid: int = 16) -> tuple[LossBreakdown, GradientRecord]:
    """Loss over a batch of frames with gradients for every parameter.

    Brownian exploration noise of standard deviation ``brownian_scale`` (that
    is eps * dt) is added to the time-t means of each frame, unless explicit
    ``mean_offsets`` are given.  ``confidence`` is "fresh" (evaluate with
    gradient), "cached" (report ``cached_confidence``, no gradient) or "off".
    """
    if not batch:
        raise ValueError("total_loss needs a non-empty batch")
    render_cfg = render_cfg or RenderConfig()
    parts = LossBreakdown()
    rec = GradientRecord.zeros(cs)
    for i, frame in enumerate(batch):
        cam = manifest.camera(frame.camera_id)
        gt = manifest.load_image(frame)
        if mean_offsets is not None:
            offset = mean_offsets[i]
        elif brownian_scale > 0:
            offset = rng.standard_normal((len(cs), 3)) * brownian_scale
        else:
            offset = None
        image, backward = render_with_grad_fn(cs, cam, frame.timestamp, render_cfg, offset)
        _, g_img, direct, p = image_energy(image, gt, cs, frame.timestamp, w)
        rec += backward(g_img)
        rec.add(direct)
        parts.l1 += p.l1
        parts.dssim += p.dssim
        parts.opacity_reg += p.opacity_reg
        parts.eigen_reg += p.eigen_reg

    if confidence == "fresh" and w.eps_alpha > 0:
        raw, _, g_conf = confidence_energy_grad(cs, manifest, w, confidence_grid)
        parts.confidence = raw
        rec += g_conf
    elif confidence == "cached":
        parts.confidence = float(cached_confidence)

    times = [f.timestamp for f in batch]
    if w.lambda_op > 0:
        e, g = opacity_prior_energy(cs, times, None, with_grad=True)
        parts.opacity_prior = e
        rec.add(g, w.lambda_op)
    if w.lambda_sigma > 0:
        e, g = shape_prior_energy(cs, None, None, with_grad=True)
        parts.shape_prior = e
        rec.add(g, w.lambda_sigma)
    if w.lambda_h > 0:
        e, g = motion_prior_energy(cs, None, None, with_grad=True)
        parts.motion_prior = e
        rec.add(g, w.lambda_h)
    parts.total = parts.weighted_sum(w)
    return parts, rec
