import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphixs.core import DatasetManifest, FrameObservation
from graphixs.uncertainty import (DegradationKind, DegradationSpec, UnreachableSparsity, apply_chain,
                                  downsample_fps, drop_cameras, faulty_cameras, realized_sparsity,
                                  unsync_cameras)

from conftest import ring_cameras


def toy_manifest(n_train=10, n_frames=6, fps=30.0, size=2):
    cams = ring_cameras(n_train + 1, size)
    for c in cams:
        c.fps = fps
    frames = [FrameObservation(c.id, k / fps, pixels=np.full((size, size, 3), (c.id * 31 + k) % 255 / 255.0))
              for c in cams for k in range(n_frames)]
    return DatasetManifest(cams, frames, (n_frames - 1) / fps, fps)


def keys(m, cam=None):
    return [f.key for f in m.frames if cam is None or f.camera_id == cam]


def frame_indices(m, cam, fps=30.0):
    return [int(round(f.timestamp * fps)) for f in m.frames_for(cam)]


def assert_holdout_preserved(before, after):
    assert after.holdout.id == before.holdout.id
    assert keys(after, before.holdout.id) == keys(before, before.holdout.id)


# -- sparse views -----------------------------------------------------------------------

def test_drop_half_of_ten():
    m = toy_manifest(10)
    out = drop_cameras(m, 0.5, seed=3)
    assert len(out.training_cameras) == 5 and len(out.cameras) == 6
    assert_holdout_preserved(m, out)
    assert out.validate() == []
    gone = set(out.metadata["degradations"][-1]["removed"])
    assert not gone & {f.camera_id for f in out.frames}


def test_drop_zero_identity_and_seeds():
    m = toy_manifest(10)
    assert keys(drop_cameras(m, 0.0, 0)) == keys(m)
    a = drop_cameras(m, 0.3, 1)
    assert keys(a) == keys(drop_cameras(m, 0.3, 1))
    removed = {tuple(drop_cameras(m, 0.3, s).metadata["degradations"][-1]["removed"]) for s in range(10)}
    assert len(removed) > 1


def test_drop_errors():
    m = toy_manifest(2)
    with pytest.raises(ValueError):
        drop_cameras(m, 1.0, 0)
    with pytest.raises(ValueError):
        drop_cameras(m, -0.1, 0)
    assert len(drop_cameras(toy_manifest(1), 0.99, 0).training_cameras) == 1


# -- frame rate ---------------------------------------------------------------------------

def test_thirty_to_ten():
    m = toy_manifest(2, n_frames=30)
    out = downsample_fps(m, 10.0)
    for c in out.training_cameras:
        assert frame_indices(out, c.id) == list(range(0, 30, 3))
        assert c.fps == 10.0
    assert_holdout_preserved(m, out)


def test_thirty_to_twenty_tie_break():
    m = toy_manifest(1, n_frames=6)
    out = downsample_fps(m, 20.0)
    assert frame_indices(out, 1) == [0, 1, 3, 4]


def test_same_rate_identity_and_idempotence():
    m = toy_manifest(3, n_frames=12)
    assert keys(downsample_fps(m, 30.0)) == keys(m)
    once = downsample_fps(m, 20.0)
    assert keys(downsample_fps(once, 20.0)) == keys(once)


@settings(max_examples=40, deadline=None)
@given(n_frames=st.integers(1, 40), target=st.sampled_from([1.0, 5.0, 7.5, 10.0, 12.0, 15.0, 20.0, 29.0, 30.0]))
def test_downsample_idempotent_property(n_frames, target):
    m = toy_manifest(2, n_frames=n_frames)
    once = downsample_fps(m, target)
    assert keys(downsample_fps(once, target)) == keys(once)
    assert keys(once, m.holdout.id) == keys(m, m.holdout.id)


def test_downsample_errors():
    m = toy_manifest(2)
    with pytest.raises(ValueError):
        downsample_fps(m, 0.0)
    with pytest.raises(ValueError):
        downsample_fps(m, 60.0)
    with pytest.raises(ValueError):
        downsample_fps(m, 10.0, [m.holdout.id])


def test_unsync_counts_and_locality():
    m = toy_manifest(10, n_frames=12)
    out = unsync_cameras(m, 0.5, 20.0, seed=4)
    slow = [c.id for c in out.cameras if c.fps == 20.0]
    assert len(slow) == 5 and m.holdout.id not in slow
    for c in out.cameras:
        if c.id not in slow:
            before = m.frames_for(c.id)
            after = out.frames_for(c.id)
            assert [f.key for f in after] == [f.key for f in before]
            assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(after, before))
    assert keys(unsync_cameras(m, 0.0, 20.0, 4)) == keys(m)
    assert out.metadata["degradations"][-1]["kind"] == "unsync"


# -- sparsity accounting ---------------------------------------------------------------------

def test_realized_sparsity_examples():
    m = toy_manifest(4, n_frames=6)
    assert realized_sparsity(m, m) == 0.0
    half = m.with_frames([f for f in m.frames if f.camera_id == m.holdout.id or round(f.timestamp * 30) % 2 == 0])
    assert realized_sparsity(half, m) == 0.5
    alien = m.with_frames(m.frames + [FrameObservation(1, 0.5, pixels=np.zeros((2, 2, 3)))])
    with pytest.raises(ValueError):
        realized_sparsity(alien, m)


@pytest.mark.parametrize("n_train, dropped, expected", [(3, 0, 1 - 12 / 18), (4, 1, 1 - 12 / 24)])
def test_composite_hand_count(n_train, dropped, expected):
    # drop 30% of the training cameras, then 30 -> 20 fps on the rest: each camera keeps
    # source frames {0, 1, 3, 4} of 6
    m = toy_manifest(n_train, n_frames=6)
    out = apply_chain(m, [DegradationSpec("sparse-views", fraction=0.3, seed=2),
                          DegradationSpec("sparse-frames", target_fps=20.0)])
    assert len(out.training_cameras) == n_train - dropped
    assert realized_sparsity(out, m) == pytest.approx(expected, abs=1e-15)
    assert [d["kind"] for d in out.metadata["degradations"]] == ["sparse-views", "sparse-frames"]


# -- faulty cameras -------------------------------------------------------------------------------

def test_faulty_zero_identity():
    m = toy_manifest(8, n_frames=20)
    assert keys(faulty_cameras(m, 0.0, 1)) == keys(m)


@pytest.mark.parametrize("target", [0.13, 0.37])
def test_faulty_targets(target):
    m = toy_manifest(8, n_frames=20)
    for seed in range(10):
        out = faulty_cameras(m, target, seed)
        assert abs(realized_sparsity(out, m) - target) <= 0.01
        assert_holdout_preserved(m, out)
        assert keys(out) == keys(faulty_cameras(m, target, seed))


def test_faulty_unreachable_and_range():
    m = toy_manifest(1, n_frames=6)  # six training frames: 1/6 is the closest step to 0.13
    with pytest.raises(UnreachableSparsity):
        faulty_cameras(m, 0.13, 0)
    with pytest.raises(ValueError):
        faulty_cameras(m, 0.95, 0)


# -- specs ---------------------------------------------------------------------------------------

def test_spec_validation_and_round_trip():
    with pytest.raises(ValueError):
        DegradationSpec("sparse-frames")
    with pytest.raises(ValueError):
        DegradationSpec("faulty")
    with pytest.raises(ValueError):
        DegradationSpec("nonsense")
    s = DegradationSpec("unsync", fraction=0.1, target_fps=20.0, seed=5)
    assert s.kind is DegradationKind.UNSYNC
    assert DegradationSpec.from_dict(s.to_dict()) == s


@pytest.mark.parametrize("spec", [DegradationSpec("sparse-views", fraction=0.3, seed=1),
                                  DegradationSpec("sparse-frames", target_fps=10.0),
                                  DegradationSpec("unsync", fraction=0.5, target_fps=20.0, seed=1),
                                  DegradationSpec("faulty", target_sparsity=0.37, seed=1)])
def test_every_kind_valid_deterministic_holdout_safe(spec):
    m = toy_manifest(6, n_frames=15)
    a, b = spec.apply(m), spec.apply(m)
    assert a.validate() == []
    assert keys(a) == keys(b)
    assert_holdout_preserved(m, a)
    assert a.metadata["degradations"][-1]["kind"] == spec.kind.value
    assert m.metadata.get("degradations", []) == []
