"""Manifest transforms that simulate missing cameras, low frame rates,
unsynchronized cameras and camera outages."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Iterable, Optional

import numpy as np

from .core import DatasetManifest

TIE_TOL = 1e-9
SPARSITY_TOL = 0.01
FAULTY_MAX_EVENTS = 100_000
FULL_FAILURE_PROB = 0.1
OUTAGE_MEAN_FRACTION = 0.1


class DegradationKind(str, Enum):
    SPARSE_VIEWS = "sparse-views"
    SPARSE_FRAMES = "sparse-frames"
    UNSYNC = "unsync"
    FAULTY = "faulty"


class UnreachableSparsity(RuntimeError):
    pass


def _record(m: DatasetManifest, frames, new_cameras=None, **entry) -> DatasetManifest:
    chain = list(m.metadata.get("degradations", []))
    chain.append(entry)
    out = m.with_frames(frames, new_cameras, degradations=chain)
    errs = out.validate()
    if errs:
        raise ValueError("degraded manifest is invalid: " + "; ".join(errs))
    return out


def _pick_training(m: DatasetManifest, fraction: float, seed) -> list[int]:
    ids = [c.id for c in m.training_cameras]
    k = int(math.floor(fraction * len(ids) + 1e-12))
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(ids, size=k, replace=False)) if k else []


def drop_cameras(m: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Remove floor(fraction * #training cameras) training cameras and their frames."""
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    n = len(m.training_cameras)
    if n == 0 or math.floor(fraction * n + 1e-12) >= n:
        raise ValueError("fraction would remove all training cameras")
    gone = set(_pick_training(m, fraction, seed))
    cams = [c for c in m.cameras if c.id not in gone]
    frames = [f for f in m.frames if f.camera_id not in gone]
    return _record(m, frames, cams, kind=DegradationKind.SPARSE_VIEWS.value, fraction=fraction,
                   seed=seed, removed=sorted(gone))


def _select_nearest(frames, target_fps: float, source_fps: float) -> list:
    """Nearest source frame to each target time k / target_fps.

    Targets run over the recorded span, which ends one source frame period
    after the last frame; this keeps a second pass at the same rate an identity.
    """
    if not frames:
        return []
    times = np.array([f.timestamp for f in frames])
    end = times[-1] + 1.0 / source_fps
    keep = []
    k = 0
    while True:
        t = k / target_fps
        if t >= end - TIE_TOL:
            break
        d = np.abs(times - t)
        # ties resolve to the earlier frame
        best = int(np.flatnonzero(d <= d.min() + TIE_TOL)[0])
        if not keep or keep[-1] != best:
            keep.append(best)
        k += 1
    return [frames[i] for i in sorted(set(keep))]


def downsample_fps(m: DatasetManifest, target_fps: float,
                   camera_ids: Optional[Iterable[int]] = None) -> DatasetManifest:
    """Keep, per affected camera, the nearest source frame to each k / target_fps."""
    if not target_fps > 0:
        raise ValueError("target_fps must be > 0")
    ids = set(camera_ids) if camera_ids is not None else {c.id for c in m.training_cameras}
    if m.holdout.id in ids:
        raise ValueError("the holdout camera cannot be downsampled")
    cams = m.with_frames(m.frames).cameras
    frames = []
    for c in cams:
        own = m.frames_for(c.id)
        if c.id in ids:
            if target_fps > c.fps + 1e-9:
                raise ValueError(f"camera {c.id}: target fps {target_fps} exceeds its fps {c.fps}")
            own = _select_nearest(own, target_fps, c.fps)
            c.fps = float(target_fps)
        frames.extend(own)
    return _record(m, frames, cams, kind=DegradationKind.SPARSE_FRAMES.value, target_fps=target_fps,
                   cameras=sorted(ids))


def unsync_cameras(m: DatasetManifest, fraction: float, target_fps: float, seed: int) -> DatasetManifest:
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    chosen = _pick_training(m, fraction, seed)
    if not chosen:
        return m.with_frames(m.frames)
    out = downsample_fps(m, target_fps, chosen)
    chain = out.metadata["degradations"]
    chain[-1] = {"kind": DegradationKind.UNSYNC.value, "fraction": fraction, "target_fps": target_fps,
                 "seed": seed, "cameras": chosen}
    return out


def realized_sparsity(degraded: DatasetManifest, reference: DatasetManifest) -> float:
    """1 - (#training frames in degraded) / (#training frames in reference)."""
    held = {c.id for c in reference.cameras if c.is_holdout}
    ref_keys = {f.key for f in reference.frames}
    for f in degraded.frames:
        if f.key not in ref_keys:
            raise ValueError(f"frame {f.key} is absent from the reference manifest")
    n_ref = sum(1 for f in reference.frames if f.camera_id not in held)
    if n_ref == 0:
        raise ValueError("reference has no training frames")
    n_deg = sum(1 for f in degraded.frames if f.camera_id not in held)
    return 1.0 - n_deg / n_ref


def faulty_cameras(m: DatasetManifest, target_sparsity: float, seed: int) -> DatasetManifest:
    """Seeded camera outages until the realized training-frame sparsity reaches the target.

    Each event is either a full camera failure or an outage interval with a
    uniform start and a geometric length (mean 10% of the video).  The event
    that crosses the target is truncated, so the realized sparsity lands on
    the nearest attainable frame count.
    """
    if not 0 <= target_sparsity <= 0.9:
        raise ValueError("target_sparsity must lie in [0, 0.9]")
    train = m.training_frames()
    n = len(train)
    goal = int(round(target_sparsity * n))
    if n == 0 or abs(goal / n - target_sparsity) > SPARSITY_TOL:
        raise UnreachableSparsity(f"{n} training frames cannot realize sparsity {target_sparsity}")
    if goal == 0:
        return _record(m, m.frames, kind=DegradationKind.FAULTY.value, target_sparsity=target_sparsity,
                       seed=seed, realized=0.0, events=[])
    rng = np.random.default_rng(seed)
    by_cam = {}
    for f in train:
        by_cam.setdefault(f.camera_id, []).append(f)
    cam_ids = sorted(by_cam)
    removed: set = set()
    events = []
    for _ in range(FAULTY_MAX_EVENTS):
        cid = int(rng.choice(cam_ids))
        own = by_cam[cid]
        if rng.random() < FULL_FAILURE_PROB:
            hit = own
            events.append({"camera": cid, "type": "failure"})
        else:
            mean_len = max(OUTAGE_MEAN_FRACTION * len(own), 1.0)
            length = int(rng.geometric(1.0 / mean_len))
            start = int(rng.integers(0, len(own)))
            hit = own[start:start + length]
            events.append({"camera": cid, "type": "outage", "start": own[start].timestamp,
                           "frames": len(hit)})
        for f in hit:
            if f.key not in removed:
                removed.add(f.key)
                if len(removed) == goal:
                    break
        if len(removed) == goal:
            break
    else:
        raise UnreachableSparsity(f"target {target_sparsity} not reached within {FAULTY_MAX_EVENTS} events")
    frames = [f for f in m.frames if f.key not in removed]
    return _record(m, frames, kind=DegradationKind.FAULTY.value, target_sparsity=target_sparsity,
                   seed=seed, realized=len(removed) / n, events=events)


@dataclass
class DegradationSpec:
    kind: DegradationKind
    fraction: float = 0.0
    target_fps: Optional[float] = None
    target_sparsity: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        self.kind = DegradationKind(self.kind)
        if self.kind in (DegradationKind.SPARSE_VIEWS, DegradationKind.UNSYNC) and not 0 <= self.fraction < 1:
            raise ValueError("fraction must lie in [0, 1)")
        if self.kind in (DegradationKind.SPARSE_FRAMES, DegradationKind.UNSYNC):
            if self.target_fps is None or not self.target_fps > 0:
                raise ValueError(f"{self.kind.value} needs target_fps > 0")
        if self.kind is DegradationKind.FAULTY:
            if self.target_sparsity is None or not 0 <= self.target_sparsity < 1:
                raise ValueError("faulty needs target_sparsity in [0, 1)")

    def apply(self, m: DatasetManifest) -> DatasetManifest:
        if self.kind is DegradationKind.SPARSE_VIEWS:
            return drop_cameras(m, self.fraction, self.seed)
        if self.kind is DegradationKind.SPARSE_FRAMES:
            return downsample_fps(m, self.target_fps)
        if self.kind is DegradationKind.UNSYNC:
            return unsync_cameras(m, self.fraction, self.target_fps, self.seed)
        return faulty_cameras(m, self.target_sparsity, self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        return cls(**d)


def apply_chain(m: DatasetManifest, chain: Iterable[DegradationSpec]) -> DatasetManifest:
    for spec in chain:
        m = spec.apply(m)
    return m
