"""SGHMC updates, component initialization, relocation and the training loop."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .core import (FIELDS, GAUSSIAN_NU, NU_MIN, SCALE_FLOOR, ComponentSet, DatasetManifest, KernelKind,
                   logit, sh_coeff_count)
from .dynamics import brownian_eps_at
from .kernels import SH_C0
from .objective import LossWeights, component_confidence, total_loss
from .renderer import GradientRecord, RenderConfig

U_FLOOR = 1e-4

DEFAULT_LR = {"mu": 2e-4, "rot": 5e-4, "log_scale": 1e-3, "opacity_logit": 5e-3, "sh": 2e-3,
              "g": 1e-4, "u": 1e-4, "v": 2e-4, "a": 2e-4, "j": 2e-4, "s": 2e-4, "nu": 1e-3}


@dataclass
class TrainConfig:
    iterations: int = 3000
    batch_frames: int = 2
    n_components: int = 60
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    friction: float = 0.1
    temperature: float = 1e-8
    preconditioned: bool = True
    precond_decay: float = 0.99
    precond_eps: float = 1e-5
    brownian_eps: float = 0.01
    dt: float = 1.0
    relocation_interval: int = 100
    relocation_fraction: float = 0.05
    relocation_stop: float = 0.75
    confidence_interval: int = 50
    confidence_grid: int = 16
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    kernel: str = "gaussian"
    nu_init: float = 5.0
    sh_degree: int = 1
    max_scale: float = 2.0
    no_confidence: bool = False
    no_higher_order: bool = False
    baseline: bool = False
    background: tuple = (0.0, 0.0, 0.0)
    eval_every: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        lr = dict(DEFAULT_LR)
        lr.update(self.lr)
        self.lr = lr
        self.background = tuple(self.background)
        KernelKind.parse(self.kernel)
        if any(v <= 0 for v in self.lr.values()):
            raise ValueError("learning rates must be > 0")
        if not 0 < self.friction <= 1:
            raise ValueError("friction must lie in (0, 1]")
        if self.temperature < 0 or self.brownian_eps < 0 or self.dt <= 0:
            raise ValueError("temperature, brownian_eps must be >= 0 and dt > 0")
        if not self.precond_eps > 0:
            raise ValueError("precond_eps must be > 0")
        if not 0 <= self.relocation_fraction < 1:
            raise ValueError("relocation_fraction must lie in [0, 1)")

    @property
    def kernel_kind(self) -> KernelKind:
        return KernelKind.parse(self.kernel)

    def effective(self) -> "TrainConfig":
        """Apply the mode flags: baseline mode and the two ablations."""
        w = self.weights
        cfg = replace(self, weights=replace(w))
        if cfg.no_confidence:
            cfg.weights.eps_alpha = 0.0
        if cfg.baseline:
            cfg.weights = replace(cfg.weights, eps_alpha=0.0, lambda_sigma=0.0, lambda_h=0.0,
                                  lambda_op=0.0)
            cfg.temperature = 0.0
            cfg.brownian_eps = 0.0
        return cfg

    def frozen(self) -> set:
        out = set()
        if self.kernel_kind is KernelKind.GAUSSIAN:
            out.add("nu")
        if self.no_higher_order:
            out.update(("a", "j", "s"))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class SghmcState:
    momentum: dict
    precond: dict
    iteration: int
    rng: np.random.Generator

    @classmethod
    def create(cls, cs: ComponentSet, rng: np.random.Generator) -> "SghmcState":
        return cls({k: np.zeros_like(getattr(cs, k)) for k in FIELDS},
                   {k: np.zeros_like(getattr(cs, k)) for k in FIELDS}, 0, rng)


def sghmc_step(cs: ComponentSet, grads: GradientRecord, state: SghmcState, cfg: TrainConfig,
               frozen: Optional[set] = None) -> tuple[ComponentSet, SghmcState]:
    """One SGHMC update per parameter class.

    m <- (1 - friction) m - lr * grad + N(0, 2 friction lr temperature);  theta <- theta + m.
    With ``cfg.preconditioned`` the gradient and noise are rescaled by an RMS
    preconditioner, per parameter entry.
    """
    grads.check_finite()
    frozen = cfg.frozen() if frozen is None else frozen
    new = {}
    for name in FIELDS:
        theta = getattr(cs, name)
        if name in frozen:
            new[name] = theta.copy()
            continue
        lr = cfg.lr[name]
        g = grads[name]
        m = state.momentum[name]
        if cfg.preconditioned:
            v = state.precond[name]
            v *= cfg.precond_decay
            v += (1 - cfg.precond_decay) * g * g
            bias = 1 - cfg.precond_decay ** (state.iteration + 1)
            pre = 1.0 / (np.sqrt(v / bias) + cfg.precond_eps)
        else:
            pre = 1.0
        m *= (1.0 - cfg.friction)
        m -= lr * pre * g
        if cfg.temperature > 0:
            m += np.sqrt(2.0 * cfg.friction * lr * cfg.temperature * pre) * state.rng.standard_normal(m.shape)
        new[name] = theta + m
    rot = new["rot"]
    new["rot"] = rot / np.linalg.norm(rot, axis=1, keepdims=True)
    new["u"] = np.maximum(new["u"], U_FLOOR)
    new["log_scale"] = np.clip(new["log_scale"], math.log(SCALE_FLOOR) + 1e-9, math.log(cfg.max_scale))
    new["nu"] = np.maximum(new["nu"], NU_MIN)
    state.iteration += 1
    return ComponentSet(**new, kernel_kind=cs.kernel_kind, sh_degree=cs.sh_degree), state


# ---------------------------------------------------------------------------
# initialization and relocation

def _axes_focus(cams) -> np.ndarray:
    """Least-squares closest point to all optical axes."""
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for c in cams:
        d = c.R[2]
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ c.center
    return np.linalg.lstsq(A, b, rcond=None)[0]


def in_all_frusta(points: np.ndarray, cams, near: float = 0.01) -> np.ndarray:
    ok = np.ones(len(points), dtype=bool)
    for c in cams:
        p = points @ c.R.T + c.t
        z = p[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = c.fx * p[:, 0] / z + c.cx
            v = c.fy * p[:, 1] / z + c.cy
        ok &= (z > near) & (u >= 0) & (u <= c.width) & (v >= 0) & (v <= c.height)
    return ok


def init_components(cfg: TrainConfig, manifest: DatasetManifest, n: int,
                    rng: np.random.Generator) -> ComponentSet:
    """Seed ``n`` components uniformly inside the shared view volume of the training cameras."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cams = manifest.training_cameras
    if not cams:
        raise ValueError("manifest has no training cameras")
    focus = _axes_focus(cams)
    radius = min(float(np.linalg.norm(c.center - focus)) for c in cams)
    pts = np.zeros((0, 3))
    for _ in range(200):
        cand = focus + rng.uniform(-radius, radius, (max(4 * n, 256), 3))
        pts = np.concatenate([pts, cand[in_all_frusta(cand, cams)]])
        if len(pts) >= n:
            break
    if len(pts) < n:
        raise ValueError("degenerate frustum volume: training cameras share no visible region")
    pts = pts[:n]
    if n > 1:
        dist, _ = cKDTree(pts).query(pts, k=2)
        nn = dist[:, 1]
    else:
        nn = np.array([radius * 0.1])
    log_scale = np.repeat(np.log(np.maximum(nn / 2.0, 1e-4))[:, None], 3, axis=1)

    firsts = {}
    for f in manifest.training_frames():
        if f.camera_id not in firsts:
            firsts[f.camera_id] = f
    mean_rgb = np.mean([manifest.load_image(f).reshape(-1, 3).mean(axis=0) for f in firsts.values()],
                       axis=0) if firsts else np.full(3, 0.5)
    sh = np.zeros((n, sh_coeff_count(cfg.sh_degree), 3))
    sh[:, 0, :] = (mean_rgb - 0.5) / SH_C0

    duration = manifest.duration if manifest.duration > 0 else 1.0
    kind = cfg.kernel_kind
    nu = np.full(n, GAUSSIAN_NU if kind is KernelKind.GAUSSIAN else cfg.nu_init)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return ComponentSet(mu=pts, rot=rot, log_scale=log_scale,
                        opacity_logit=np.full(n, float(logit(0.1))), sh=sh,
                        g=rng.uniform(0.0, manifest.duration, n), u=np.full(n, duration),
                        v=np.zeros((n, 3)), a=np.zeros((n, 3)), j=np.zeros((n, 3)),
                        s=np.zeros((n, 3)), nu=nu, kernel_kind=kind, sh_degree=cfg.sh_degree)


def donor_weights(conf: np.ndarray, grad_magnitudes: np.ndarray, recipients: np.ndarray) -> np.ndarray:
    """Donor sampling distribution: proportional to confidence * gradient magnitude, recipients excluded."""
    w = np.asarray(conf, dtype=float) * np.asarray(grad_magnitudes, dtype=float)
    w = np.where(np.isfinite(w) & (w > 0), w, 0.0)
    w[recipients] = 0.0
    if w.sum() <= 0:
        w = np.ones_like(w)
        w[recipients] = 0.0
    return w / w.sum()


def relocate_components(cs: ComponentSet, conf: np.ndarray, grad_magnitudes: np.ndarray,
                        cfg: TrainConfig, rng: np.random.Generator,
                        state: Optional[SghmcState] = None) -> ComponentSet:
    """Re-seed the least confident components next to confident, still-changing donors."""
    n = len(cs)
    k = int(math.floor(cfg.relocation_fraction * n))
    if k == 0 or n < 2:
        return cs
    k = min(k, n - 1)
    recipients = np.argsort(conf, kind="stable")[:k]
    probs = donor_weights(conf, grad_magnitudes, recipients)
    donors = rng.choice(n, size=k, p=probs)
    out = cs.copy()
    for r, d in zip(recipients, donors):
        out.mu[r] = cs.mu[d]
        out.g[r] = cs.g[d]
        out.u[r] = cs.u[d]
        out.rot[r] = cs.rot[d]
        out.sh[r] = cs.sh[d]
        out.nu[r] = cs.nu[d]
        out.log_scale[r] = np.maximum(cs.log_scale[d] + math.log(0.5), math.log(SCALE_FLOOR) + 1e-9)
        out.opacity_logit[r] = float(logit(0.1))
        for name in ("v", "a", "j", "s"):
            out.__dict__[name][r] = 0.0
    if state is not None:
        for name in FIELDS:
            state.momentum[name][recipients] = 0.0
    return out


# ---------------------------------------------------------------------------
# training loop

@dataclass
class _Streams:
    init: np.random.Generator
    batch: np.random.Generator
    brownian: np.random.Generator
    sghmc: np.random.Generator
    relocate: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "_Streams":
        ss = np.random.SeedSequence(seed)
        return cls(*[np.random.default_rng(s) for s in ss.spawn(5)])


def train(manifest: DatasetManifest, cfg: TrainConfig, init: Optional[ComponentSet] = None,
          callback: Optional[Callable] = None) -> tuple[ComponentSet, list[dict]]:
    """Fit a component set to the training frames of ``manifest``.

    Returns the final set and one log record per iteration.
    """
    train_frames = manifest.training_frames()
    if not manifest.training_cameras or not train_frames:
        raise ValueError("manifest needs at least one training camera with frames")
    run = cfg.effective()
    streams = _Streams.from_seed(run.seed)
    cs = init.copy() if init is not None else init_components(run, manifest, run.n_components,
                                                              streams.init)
    frozen = run.frozen()
    if run.no_higher_order:
        cs = cs.replace(a=np.zeros_like(cs.a), j=np.zeros_like(cs.j), s=np.zeros_like(cs.s))
    state = SghmcState.create(cs, streams.sghmc)
    render_cfg = RenderConfig(background=run.background)
    holdout_ids = {c.id for c in manifest.cameras if c.is_holdout}
    w = run.weights
    log = []
    conf = None
    conf_energy = 0.0
    grad_mag = np.zeros(len(cs))
    start = time.perf_counter()
    for it in range(run.iterations):
        pick = streams.batch.choice(len(train_frames), size=min(run.batch_frames, len(train_frames)),
                                    replace=False)
        batch = [train_frames[i] for i in sorted(pick)]
        assert not any(f.camera_id in holdout_ids for f in batch), "holdout frame in training batch"
        eps = brownian_eps_at(run.brownian_eps, it, run.iterations)
        fresh = w.eps_alpha > 0 and it % run.confidence_interval == 0
        parts, grads = total_loss(
            cs, manifest, batch, w, streams.brownian, render_cfg=render_cfg,
            brownian_scale=eps * run.dt,
            confidence="fresh" if fresh else ("cached" if w.eps_alpha > 0 else "off"),
            cached_confidence=conf_energy, confidence_grid=run.confidence_grid)
        if not math.isfinite(parts.total):
            raise FloatingPointError(f"non-finite loss at iteration {it}: {parts.to_dict()}")
        if fresh:
            conf_energy = parts.confidence
        cs, state = sghmc_step(cs, grads, state, run, frozen)
        grad_mag = 0.9 * grad_mag + 0.1 * np.linalg.norm(grads["mu"], axis=1)
        if (run.relocation_fraction > 0 and it > 0 and it % run.relocation_interval == 0
                and it < run.relocation_stop * run.iterations):
            conf = component_confidence(cs, manifest, run.confidence_grid)
            cs = relocate_components(cs, conf, grad_mag, run, streams.relocate, state)
        rec = {"iteration": it, **parts.to_dict(), "wall_time": time.perf_counter() - start}
        if run.eval_every and (it % run.eval_every == 0 or it == run.iterations - 1):
            from .metrics import holdout_psnr
            rec["holdout_psnr"] = holdout_psnr(cs, manifest, render_cfg)
        log.append(rec)
        if callback is not None:
            callback(it, cs, rec)
    return cs, log
