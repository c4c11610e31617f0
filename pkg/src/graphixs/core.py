"""Domain types, validation and on-disk formats shared by every other module."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy.special import expit

SCENE_FORMAT_VERSION = 1
MANIFEST_FORMAT_VERSION = 1

SCALE_FLOOR = 1e-6
ROT_TOL = 1e-9
NU_MIN = 0.5
GAUSSIAN_NU = 1e6

# Parameter fields of a component, in canonical order.
FIELDS = ("mu", "rot", "log_scale", "opacity_logit", "sh", "g", "u",
          "v", "a", "j", "s", "nu")
VECTOR_FIELDS = ("mu", "log_scale", "v", "a", "j", "s")
SCALAR_FIELDS = ("opacity_logit", "g", "u", "nu")
DYNAMIC_FIELDS = ("v", "a", "j", "s")


class KernelKind(str, Enum):
    GAUSSIAN = "gaussian"
    STUDENT_T = "student-t"

    @classmethod
    def parse(cls, value) -> "KernelKind":
        if isinstance(value, cls):
            return value
        v = str(value).lower().replace("_", "-")
        if v in ("gaussian", "gauss", "graphigs"):
            return cls.GAUSSIAN
        if v in ("student-t", "studentt", "student", "t", "graphits"):
            return cls.STUDENT_T
        raise ValueError(f"unknown kernel kind {value!r}")


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def logistic(x):
    return expit(x)


def logit(p):
    return np.log(p) - np.log1p(-p)


@dataclass
class Component:
    """One splat primitive.

    The covariance is kept factored as a unit quaternion (w, x, y, z) and
    per-axis log standard deviations; opacity is kept as a logit.
    """
    mu: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rot: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    log_scale: np.ndarray = field(default_factory=lambda: np.full(3, math.log(0.1)))
    opacity_logit: float = 0.0
    sh: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))
    g: float = 0.0
    u: float = 1.0
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    j: np.ndarray = field(default_factory=lambda: np.zeros(3))
    s: np.ndarray = field(default_factory=lambda: np.zeros(3))
    nu: float = GAUSSIAN_NU

    @property
    def opacity(self) -> float:
        return float(logistic(self.opacity_logit))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_scale, dtype=float))


def validate_component(c: Component, scene_diagonal: Optional[float] = None) -> list[str]:
    """Return a list of invariant violations; empty when the component is valid.

    The upper scale bound is only checked when ``scene_diagonal`` is given.
    """
    out = []
    for name in FIELDS:
        if not np.all(np.isfinite(np.asarray(getattr(c, name), dtype=float))):
            out.append(f"{name} must be finite")
    rot = np.asarray(c.rot, dtype=float)
    if rot.shape != (4,):
        out.append("rot must be a 4-vector")
    elif abs(float(np.linalg.norm(rot)) - 1.0) > ROT_TOL:
        out.append("rot must be unit")
    for name in VECTOR_FIELDS:
        if np.shape(getattr(c, name)) != (3,):
            out.append(f"{name} must be a 3-vector")
    sh = np.asarray(c.sh)
    if sh.ndim != 2 or sh.shape[1] != 3 or sh.shape[0] not in (1, 4, 9, 16):
        out.append("sh must have shape ((degree+1)^2, 3) with degree in 0..3")
    if not c.u > 0:
        out.append("u must be > 0")
    scale = np.exp(np.asarray(c.log_scale, dtype=float))
    if np.any(scale < SCALE_FLOOR):
        out.append(f"log_scale must satisfy exp(log_scale) >= {SCALE_FLOOR:g}")
    if scene_diagonal is not None and np.any(scale > scene_diagonal):
        out.append(f"log_scale must satisfy exp(log_scale) <= scene diagonal {scene_diagonal:g}")
    if not c.nu >= NU_MIN:
        out.append(f"nu must be >= {NU_MIN}")
    return out


class ComponentSet:
    """Struct-of-arrays container for N components.

    Arrays are indexed by component along axis 0.  ``sh`` has shape
    (N, (sh_degree+1)^2, 3); scalar fields have shape (N,).
    """

    def __init__(self, mu, rot, log_scale, opacity_logit, sh, g, u, v, a, j, s, nu,
                 kernel_kind=KernelKind.GAUSSIAN, sh_degree: int = 0):
        self.mu = np.array(mu, dtype=float).reshape(-1, 3)
        n = self.mu.shape[0]
        self.rot = np.array(rot, dtype=float).reshape(n, 4)
        self.log_scale = np.array(log_scale, dtype=float).reshape(n, 3)
        self.opacity_logit = np.array(opacity_logit, dtype=float).reshape(n)
        self.sh = np.array(sh, dtype=float).reshape(n, -1, 3)
        self.g = np.array(g, dtype=float).reshape(n)
        self.u = np.array(u, dtype=float).reshape(n)
        self.v = np.array(v, dtype=float).reshape(n, 3)
        self.a = np.array(a, dtype=float).reshape(n, 3)
        self.j = np.array(j, dtype=float).reshape(n, 3)
        self.s = np.array(s, dtype=float).reshape(n, 3)
        self.nu = np.array(nu, dtype=float).reshape(n)
        self.kernel_kind = KernelKind.parse(kernel_kind)
        self.sh_degree = int(sh_degree)
        if not 0 <= self.sh_degree <= 3:
            raise ValueError("sh_degree must be in 0..3")
        if self.sh.shape[1] != sh_coeff_count(self.sh_degree):
            raise ValueError(f"sh has {self.sh.shape[1]} coefficients, expected "
                             f"{sh_coeff_count(self.sh_degree)} for degree {self.sh_degree}")

    def __len__(self) -> int:
        return self.mu.shape[0]

    def __getitem__(self, i: int) -> Component:
        return Component(**{name: (getattr(self, name)[i].copy()
                                   if name not in SCALAR_FIELDS
                                   else float(getattr(self, name)[i]))
                            for name in FIELDS})

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_components(cls, comps: Iterable[Component], kernel_kind=KernelKind.GAUSSIAN,
                        sh_degree: Optional[int] = None) -> "ComponentSet":
        comps = list(comps)
        if not comps:
            raise ValueError("need at least one component")
        if sh_degree is None:
            sh_degree = int(round(math.sqrt(np.shape(comps[0].sh)[0]))) - 1
        arrays = {name: np.stack([np.asarray(getattr(c, name), dtype=float) for c in comps])
                  for name in FIELDS}
        return cls(**arrays, kernel_kind=kernel_kind, sh_degree=sh_degree)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in FIELDS}

    def copy(self) -> "ComponentSet":
        return ComponentSet(**{k: v.copy() for k, v in self.params().items()},
                            kernel_kind=self.kernel_kind, sh_degree=self.sh_degree)

    def replace(self, **arrays) -> "ComponentSet":
        p = {k: v.copy() for k, v in self.params().items()}
        p.update(arrays)
        return ComponentSet(**p, kernel_kind=self.kernel_kind, sh_degree=self.sh_degree)

    @property
    def opacity(self) -> np.ndarray:
        return logistic(self.opacity_logit)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def validate(self, scene_diagonal: Optional[float] = None) -> dict[int, list[str]]:
        bad = {}
        for i, c in enumerate(self):
            errs = validate_component(c, scene_diagonal)
            if errs:
                bad[i] = errs
        return bad


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (..., 4) quaternions (w, x, y, z); input is normalized."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def covariance(rot: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """Sigma = R diag(exp(2 log_scale)) R^T, batched over leading axes."""
    R = quat_to_rotmat(rot)
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=float))
    return np.einsum("...ik,...k,...jk->...ij", R, s2, R)


# ---------------------------------------------------------------------------
# cameras and manifests

@dataclass
class CameraModel:
    id: int
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))  # world -> camera rotation
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))  # world -> camera translation
    fps: float = 30.0
    is_holdout: bool = False

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def validate(self) -> list[str]:
        out = []
        if not (self.fx > 0 and self.fy > 0):
            out.append("fx, fy must be > 0")
        if not 0 <= self.cx < self.width:
            out.append("cx must lie in [0, width)")
        if not 0 <= self.cy < self.height:
            out.append("cy must lie in [0, height)")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-9) or np.linalg.det(self.R) < 0:
            out.append("R must be a proper rotation")
        return out

    def to_dict(self) -> dict:
        return {"id": int(self.id), "fx": float(self.fx), "fy": float(self.fy),
                "cx": float(self.cx), "cy": float(self.cy),
                "width": int(self.width), "height": int(self.height),
                "R": self.R.tolist(), "t": self.t.tolist(),
                "fps": float(self.fps), "is_holdout": bool(self.is_holdout)}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(id=int(d["id"]), fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                   width=int(d["width"]), height=int(d["height"]),
                   R=np.array(d["R"]), t=np.array(d["t"]), fps=d["fps"],
                   is_holdout=bool(d["is_holdout"]))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at ``eye`` looking at ``target``.

    Camera frame: +z forward, +x right, +y down (image rows grow downward).
    """
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=float)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ eye


@dataclass
class FrameObservation:
    camera_id: int
    timestamp: float
    image_path: Optional[str] = None
    pixels: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def key(self) -> tuple[int, float]:
        return (int(self.camera_id), float(self.timestamp))


@dataclass
class DatasetManifest:
    cameras: list[CameraModel]
    frames: list[FrameObservation]
    duration: float
    nominal_fps: float
    root: Optional[str] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = sorted(self.frames, key=lambda f: f.key)

    def camera(self, cam_id: int) -> CameraModel:
        for c in self.cameras:
            if c.id == cam_id:
                return c
        raise KeyError(f"no camera with id {cam_id}")

    @property
    def holdout(self) -> CameraModel:
        hs = [c for c in self.cameras if c.is_holdout]
        if len(hs) != 1:
            raise ValueError(f"manifest must have exactly one holdout camera, found {len(hs)}")
        return hs[0]

    @property
    def training_cameras(self) -> list[CameraModel]:
        return [c for c in self.cameras if not c.is_holdout]

    def training_frames(self) -> list[FrameObservation]:
        held = {c.id for c in self.cameras if c.is_holdout}
        return [f for f in self.frames if f.camera_id not in held]

    def holdout_frames(self) -> list[FrameObservation]:
        hid = self.holdout.id
        return [f for f in self.frames if f.camera_id == hid]

    def frames_for(self, cam_id: int) -> list[FrameObservation]:
        return [f for f in self.frames if f.camera_id == cam_id]

    def times(self) -> list[float]:
        return sorted({f.timestamp for f in self.frames})

    def load_image(self, frame: FrameObservation) -> np.ndarray:
        if frame.pixels is None:
            if frame.image_path is None:
                raise ValueError(f"frame {frame.key} has no image")
            path = Path(frame.image_path)
            if not path.is_absolute() and self.root is not None:
                path = Path(self.root) / path
            frame.pixels = read_image(path)
        return frame.pixels

    def validate(self) -> list[str]:
        out = []
        ids = [c.id for c in self.cameras]
        if len(set(ids)) != len(ids):
            out.append("camera ids must be unique")
        if sum(c.is_holdout for c in self.cameras) != 1:
            out.append("exactly one camera must be the holdout")
        for c in self.cameras:
            out.extend(f"camera {c.id}: {e}" for e in c.validate())
        idset = set(ids)
        for f in self.frames:
            if f.camera_id not in idset:
                out.append(f"frame {f.key} references unknown camera")
            if not 0 <= f.timestamp <= self.duration + 1e-9:
                out.append(f"frame {f.key} timestamp outside [0, duration]")
            if f.pixels is not None:
                cam = self.camera(f.camera_id)
                if f.pixels.shape != (cam.height, cam.width, 3):
                    out.append(f"frame {f.key} image shape does not match camera")
        keys = [f.key for f in self.frames]
        if keys != sorted(keys):
            out.append("frames must be sorted by (camera id, timestamp)")
        return out

    def with_frames(self, frames, cameras=None, **metadata) -> "DatasetManifest":
        meta = json.loads(json.dumps(self.metadata))
        meta.update(metadata)
        return DatasetManifest(cameras=cameras if cameras is not None else
                               [CameraModel.from_dict(c.to_dict()) for c in self.cameras],
                               frames=list(frames), duration=self.duration,
                               nominal_fps=self.nominal_fps, root=self.root, metadata=meta)


# ---------------------------------------------------------------------------
# images

def validate_image(img: np.ndarray) -> list[str]:
    out = []
    if img.ndim != 3 or img.shape[2] != 3:
        out.append("image must be H x W x 3")
    if not np.all(np.isfinite(img)):
        out.append("image must be finite")
    elif img.size and (img.min() < 0 or img.max() > 1):
        out.append("image channels must lie in [0, 1]")
    return out


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid and return as reals in [0, 1]."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def write_image(path, img: np.ndarray) -> None:
    from PIL import Image
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    from PIL import Image
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


# ---------------------------------------------------------------------------
# persistence

def _real(x) -> float:
    # 17 significant digits always round-trips a binary64 value
    return float(f"{float(x):.17g}")


def _tolist(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return _real(a)
    return [_tolist(x) for x in a]


def scene_to_dict(cs: ComponentSet, metadata: Optional[dict] = None) -> dict:
    header = {"format_version": SCENE_FORMAT_VERSION, "kernel_kind": cs.kernel_kind.value,
              "sh_degree": cs.sh_degree, "count": len(cs)}
    records = []
    for i in range(len(cs)):
        records.append({name: _tolist(getattr(cs, name)[i]) for name in FIELDS})
    d = {"header": header, "components": records}
    if metadata:
        d["metadata"] = metadata
    return d


def scene_from_dict(d: dict) -> ComponentSet:
    h = d["header"]
    if h.get("format_version") != SCENE_FORMAT_VERSION:
        raise ValueError(f"unsupported scene format version {h.get('format_version')}")
    recs = d["components"]
    if len(recs) != h["count"]:
        raise ValueError("component count does not match header")
    arrays = {name: np.array([r[name] for r in recs], dtype=float) for name in FIELDS}
    return ComponentSet(**arrays, kernel_kind=h["kernel_kind"], sh_degree=h["sh_degree"])


def save_scene(path, cs: ComponentSet, metadata: Optional[dict] = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(scene_to_dict(cs, metadata), f, indent=1)


def load_scene(path) -> ComponentSet:
    with open(path) as f:
        return scene_from_dict(json.load(f))


def load_scene_metadata(path) -> dict:
    with open(path) as f:
        return json.load(f).get("metadata", {})


def manifest_to_dict(m: DatasetManifest) -> dict:
    return {"format_version": MANIFEST_FORMAT_VERSION,
            "duration": _real(m.duration), "nominal_fps": _real(m.nominal_fps),
            "metadata": m.metadata,
            "cameras": [c.to_dict() for c in m.cameras],
            "frames": [{"camera_id": int(f.camera_id), "timestamp": _real(f.timestamp),
                        "image": f.image_path} for f in m.frames]}


def manifest_from_dict(d: dict, root=None) -> DatasetManifest:
    if d.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise ValueError(f"unsupported manifest format version {d.get('format_version')}")
    cams = [CameraModel.from_dict(c) for c in d["cameras"]]
    frames = [FrameObservation(int(f["camera_id"]), float(f["timestamp"]), f.get("image"))
              for f in d["frames"]]
    return DatasetManifest(cams, frames, float(d["duration"]), float(d["nominal_fps"]),
                           root=None if root is None else str(root),
                           metadata=d.get("metadata", {}))


def save_manifest(path, m: DatasetManifest, image_dir: Optional[str] = None) -> None:
    """Write ``m`` to ``path``.

    Frames carrying in-memory pixels but no image path are written as PNG files
    into ``image_dir`` (default: ``images/`` next to the manifest).
    """
    path = Path(path)
    base = path.parent
    base.mkdir(parents=True, exist_ok=True)
    pending = [f for f in m.frames if f.image_path is None and f.pixels is not None]
    if pending:
        img_dir = Path(image_dir) if image_dir else base / "images"
        img_dir.mkdir(parents=True, exist_ok=True)
        for f in pending:
            name = f"cam{f.camera_id:03d}_t{f.timestamp:.6f}.png"
            write_image(img_dir / name, f.pixels)
            f.image_path = os.path.relpath(img_dir / name, base)
    elif m.root is not None and Path(m.root).resolve() != base.resolve():
        # keep image references valid when the manifest moves
        for f in m.frames:
            if f.image_path is not None and not os.path.isabs(f.image_path):
                f.image_path = os.path.relpath(Path(m.root) / f.image_path, base)
        m.root = str(base)
    with open(path, "w") as fh:
        json.dump(manifest_to_dict(m), fh, indent=1)
    m.root = str(base)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path) as f:
        return manifest_from_dict(json.load(f), root=path.parent)


def scene_bounds(cs: ComponentSet, times) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box holding every mean at every time, inflated by 3 * max axis scale."""
    from .dynamics import mean_at_time_batch
    times = list(times)
    if not times:
        raise ValueError("scene_bounds needs at least one time")
    if len(cs) == 0:
        raise ValueError("scene_bounds needs a non-empty component set")
    pts = np.concatenate([mean_at_time_batch(cs, t) for t in times])
    pad = 3.0 * float(np.max(cs.scale))
    return pts.min(axis=0) - pad, pts.max(axis=0) + pad
