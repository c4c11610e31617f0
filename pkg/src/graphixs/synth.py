"""Synthetic ground-truth scenes and rendered multi-view video datasets."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (CameraModel, ComponentSet, DatasetManifest, FrameObservation, KernelKind, look_at,
                   quantize, save_manifest, save_scene, sh_coeff_count)
from .kernels import SH_C0
from .renderer import RenderConfig, render_image

PROFILES = ("static", "linear", "quartic", "mixed")
STATIC_SHARE = 0.7


@dataclass
class SceneSpec:
    n_components: int = 30
    profile: str = "mixed"
    sh_degree: int = 1
    n_cameras: int = 9
    radius: float = 2.5
    fov_deg: float = 45.0
    duration: float = 0.95
    fps: float = 20.0
    width: int = 32
    height: int = 32
    kernel: str = "gaussian"
    nu: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}")
        if min(self.n_components, self.n_cameras, self.width, self.height) < 1:
            raise ValueError("counts must be >= 1")
        if self.n_cameras < 2:
            raise ValueError("need a holdout camera plus at least one training camera")
        if not self.duration > 0 or not self.fps > 0 or not self.radius > 0:
            raise ValueError("duration, fps and radius must be > 0")
        if not 0 < self.fov_deg < 180:
            raise ValueError("fov_deg must lie in (0, 180)")
        KernelKind.parse(self.kernel)

    @property
    def timestamps(self) -> list[float]:
        n = int(math.floor(self.duration * self.fps + 1e-9)) + 1
        return [k / self.fps for k in range(n)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path) -> "SceneSpec":
        with open(path) as f:
            return cls(**json.load(f))


def round_trip_spec(seed: int = 0) -> SceneSpec:
    """30 mixed components, 8 training cameras plus the holdout, 20 frames at 32x32."""
    return SceneSpec(n_components=30, profile="mixed", n_cameras=9, duration=0.95, fps=20.0,
                     width=32, height=32, seed=seed)


def hemisphere_cameras(spec: SceneSpec) -> list[CameraModel]:
    """Cameras on a golden-angle spiral over the upper hemisphere, all aimed at the origin."""
    f = 0.5 * spec.width / math.tan(math.radians(spec.fov_deg) / 2)
    golden = math.pi * (3 - math.sqrt(5))
    cams = []
    for i in range(spec.n_cameras):
        # elevations between 10 and 60 degrees keep every view off the zenith; the
        # holdout (camera 0) takes the middle elevation slot so it is interpolated
        slot = (i + spec.n_cameras // 2) % spec.n_cameras
        elev = math.radians(10 + 50 * (slot + 0.5) / spec.n_cameras)
        az = i * golden
        eye = spec.radius * np.array([math.cos(elev) * math.cos(az), math.cos(elev) * math.sin(az),
                                      math.sin(elev)])
        R, t = look_at(eye, np.zeros(3))
        cams.append(CameraModel(id=i, fx=f, fy=f, cx=spec.width / 2, cy=spec.height / 2,
                                width=spec.width, height=spec.height, R=R, t=t, fps=spec.fps,
                                is_holdout=(i == 0)))
    return cams


def _random_quats(rng, n):
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * np.where(q[:, :1] < 0, -1.0, 1.0)


def sample_components(spec: SceneSpec, rng: np.random.Generator) -> ComponentSet:
    n = spec.n_components
    kind = KernelKind.parse(spec.kernel)
    if spec.profile == "mixed":
        n_static = int(round(STATIC_SHARE * n))
        static = np.arange(n) < n_static
    else:
        static = np.full(n, spec.profile == "static")
    moving = ~static
    mu = rng.uniform(-0.5, 0.5, (n, 3))
    size = np.where(static & (spec.profile == "mixed"), rng.uniform(0.12, 0.22, n), rng.uniform(0.05, 0.1, n))
    log_scale = np.log(size)[:, None] + rng.uniform(-0.3, 0.3, (n, 3))
    rgb = rng.uniform(0.1, 0.9, (n, 3))
    sh = np.zeros((n, sh_coeff_count(spec.sh_degree), 3))
    sh[:, 0] = (rgb - 0.5) / SH_C0
    if spec.sh_degree > 0:
        sh[:, 1:] = rng.normal(0.0, 0.05, sh[:, 1:].shape)
    g = rng.uniform(0.0, spec.duration, n)
    u = np.where(static, 10.0 * spec.duration, rng.uniform(0.6, 1.2, n) * spec.duration)
    zeros = np.zeros((n, 3))
    v, a, j, s = zeros.copy(), zeros.copy(), zeros.copy(), zeros.copy()
    k = int(moving.sum())
    if k:
        v[moving] = rng.normal(0.0, 0.3, (k, 3))
        if spec.profile in ("quartic", "mixed"):
            a[moving] = rng.normal(0.0, 0.5, (k, 3))
            j[moving] = rng.normal(0.0, 1.0, (k, 3))
            s[moving] = rng.normal(0.0, 2.0, (k, 3))
    nu = np.full(n, 1e6 if kind is KernelKind.GAUSSIAN else spec.nu)
    return ComponentSet(mu=mu, rot=_random_quats(rng, n), log_scale=log_scale,
                        opacity_logit=np.log(p := rng.uniform(0.5, 0.95, n)) - np.log1p(-p),
                        sh=sh, g=g, u=u, v=v, a=a, j=j, s=s, nu=nu, kernel_kind=kind,
                        sh_degree=spec.sh_degree)


def render_dataset(cs: ComponentSet, cams: list[CameraModel], times: list[float],
                   cfg: Optional[RenderConfig] = None) -> list[FrameObservation]:
    frames = []
    for cam in cams:
        for t in times:
            img = quantize(render_image(cs, cam, t, cfg))
            frames.append(FrameObservation(cam.id, t, pixels=img))
    return frames


def synth_scene(spec: SceneSpec, out_dir=None) -> tuple[ComponentSet, DatasetManifest]:
    """Sample a ground-truth component set and render every (camera, timestamp) frame.

    Images are quantized to 8 bits.  With ``out_dir`` the scene, manifest and
    PNG images are written there.
    """
    rng = np.random.default_rng(spec.seed)
    cs = sample_components(spec, rng)
    errs = cs.validate()
    if errs:
        raise ValueError(f"sampled scene is invalid: {dict(list(errs.items())[:5])}")
    cams = hemisphere_cameras(spec)
    times = spec.timestamps
    frames = render_dataset(cs, cams, times)
    manifest = DatasetManifest(cameras=cams, frames=frames, duration=times[-1], nominal_fps=spec.fps,
                               metadata={"scene_spec": spec.to_dict(), "degradations": []})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_scene(out / "scene.json", cs, metadata={"scene_spec": spec.to_dict(),
                                                     "cameras": [c.to_dict() for c in cams]})
        save_manifest(out / "manifest.json", manifest)
        manifest.root = str(out)
    return cs, manifest
