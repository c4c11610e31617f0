"""Image quality metrics and held-out evaluation reports."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .core import ComponentSet, DatasetManifest
from .objective import SSIM_C1, SSIM_C2, _filter_valid, _gauss_window
from .renderer import RenderConfig, render_image

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
_WIN = _gauss_window()
_WIN_SIZE = _WIN.size


def _pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _downsample(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling; odd sides are zero padded by one on both ends (pad counted)."""
    h, w = x.shape[:2]
    ph, pw = h % 2, w % 2
    x = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
    h2, w2 = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h2, :w2]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim_levels(height: int, width: int) -> int:
    """Number of dyadic scales (at most 5) whose smallest side still fits the 11-tap window."""
    side = min(height, width)
    if side < _WIN_SIZE:
        raise ValueError(f"image too small for MS-SSIM: min side {side} < {_WIN_SIZE}")
    levels = 1
    while levels < 5:
        side = (side + 1) // 2
        if side < _WIN_SIZE:
            break
        levels += 1
    return levels


def _ssim_cs(x, y):
    mx, my = _filter_valid(x), _filter_valid(y)
    sxx = _filter_valid(x * x) - mx * mx
    syy = _filter_valid(y * y) - my * my
    sxy = _filter_valid(x * y) - mx * my
    cs = (2 * sxy + SSIM_C2) / (sxx + syy + SSIM_C2)
    lum = (2 * mx * my + SSIM_C1) / (mx * mx + my * my + SSIM_C1)
    # per-channel means
    return (lum * cs).mean(axis=(0, 1)), cs.mean(axis=(0, 1))


def ms_ssim(a, b, levels: Optional[int] = None) -> float:
    """Multi-scale SSIM on [0, 1] images.

    Uses 5 scales when the image is large enough, otherwise the largest count
    that keeps the window inside the coarsest scale, with the standard
    weights renormalized over the scales used.
    """
    x, y = _pair(a, b)
    if levels is None:
        levels = ms_ssim_levels(*x.shape[:2])
    weights = MS_SSIM_WEIGHTS[:levels] / MS_SSIM_WEIGHTS[:levels].sum()
    vals = []
    for lvl in range(levels):
        ssim_c, cs_c = _ssim_cs(x, y)
        if lvl < levels - 1:
            vals.append(np.maximum(cs_c, 0.0))
            x, y = _downsample(x), _downsample(y)
        else:
            vals.append(np.maximum(ssim_c, 0.0))
    stack = np.stack(vals)  # (levels, channels)
    per_channel = np.prod(stack ** weights[:, None], axis=0)
    return float(per_channel.mean())


def dssim(a, b) -> float:
    return (1.0 - ms_ssim(a, b)) / 2.0


@dataclass
class FrameScore:
    timestamp: float
    psnr: float
    dssim: float


@dataclass
class EvalReport:
    frames: list
    mean_psnr: float
    mean_dssim: float
    config: dict = field(default_factory=dict)
    lpips: str = "unavailable"

    @classmethod
    def from_frames(cls, frames: list, config: Optional[dict] = None) -> "EvalReport":
        frames = sorted(frames, key=lambda f: f.timestamp)
        return cls(frames, float(np.mean([f.psnr for f in frames])),
                   float(np.mean([f.dssim for f in frames])), dict(config or {}))

    def to_dict(self) -> dict:
        return {"frames": [asdict(f) for f in self.frames], "mean_psnr": self.mean_psnr,
                "mean_dssim": self.mean_dssim, "lpips": self.lpips, "config": self.config}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf)
        wr.writerow(["timestamp", "psnr", "dssim", "lpips"])
        for f in self.frames:
            wr.writerow([repr(f.timestamp), repr(f.psnr), repr(f.dssim), self.lpips])
        wr.writerow(["mean", repr(self.mean_psnr), repr(self.mean_dssim), self.lpips])
        return buf.getvalue()

    def save(self, path) -> None:
        path = str(path)
        with open(path, "w") as f:
            f.write(self.to_json())
        base = path[:-5] if path.endswith(".json") else path
        with open(base + ".csv", "w", newline="") as f:
            f.write(self.to_csv())


def evaluate(cs: ComponentSet, manifest: DatasetManifest, cfg: Optional[RenderConfig] = None,
             config: Optional[dict] = None, with_dssim: bool = True) -> EvalReport:
    """Render the holdout camera at every holdout timestamp and score it against the stored images."""
    cam = manifest.holdout
    frames = manifest.holdout_frames()
    if not frames:
        raise ValueError("manifest has no holdout frames")
    scores = []
    for f in frames:
        gt = manifest.load_image(f)
        img = render_image(cs, cam, f.timestamp, cfg)
        scores.append(FrameScore(f.timestamp, psnr(img, gt), dssim(img, gt) if with_dssim else float("nan")))
    echo = {"degradations": manifest.metadata.get("degradations", [])}
    echo.update(config or {})
    return EvalReport.from_frames(scores, echo)


def holdout_psnr(cs: ComponentSet, manifest: DatasetManifest, cfg: Optional[RenderConfig] = None) -> float:
    return evaluate(cs, manifest, cfg, with_dssim=False).mean_psnr
