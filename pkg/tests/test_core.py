import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphixs.core import (CameraModel, Component, ComponentSet, DatasetManifest, FrameObservation, KernelKind,
                           covariance, load_manifest, load_scene, look_at, quat_to_rotmat, save_manifest,
                           save_scene, scene_bounds, validate_component)
from graphixs.dynamics import mean_at_time

from conftest import random_manifest, random_set


def test_default_component_is_valid():
    assert validate_component(Component()) == []


def test_zero_duration_reported():
    assert validate_component(Component(u=0.0)) == ["u must be > 0"]


def test_non_unit_rotation_reported():
    assert validate_component(Component(rot=np.array([1.1, 0, 0, 0]))) == ["rot must be unit"]


def test_scale_bounds_and_nu_floor():
    errs = validate_component(Component(log_scale=np.full(3, math.log(1e-7)), nu=0.4))
    assert any(e.startswith("log_scale") for e in errs)
    assert any(e.startswith("nu") for e in errs)
    big = Component(log_scale=np.full(3, math.log(5.0)))
    assert validate_component(big) == []
    assert validate_component(big, scene_diagonal=2.0)


@settings(max_examples=200, deadline=None)
@given(qnorm=st.floats(0.5, 1.5), log_s=st.floats(-16, 3), u=st.floats(-1, 2), nu=st.floats(0.1, 10))
def test_validate_empty_exactly_on_invariant_set(qnorm, log_s, u, nu):
    q = np.array([qnorm, 0, 0, 0])
    c = Component(rot=q, log_scale=np.full(3, log_s), u=u, nu=nu)
    holds = abs(qnorm - 1) <= 1e-9 and u > 0 and math.exp(log_s) >= 1e-6 and nu >= 0.5
    assert (validate_component(c) == []) == holds


def test_covariance_is_rotated_diagonal(rng):
    q = rng.normal(size=(5, 4))
    ls = rng.normal(size=(5, 3))
    cov = covariance(q, ls)
    R = quat_to_rotmat(q)
    for i in range(5):
        ref = R[i] @ np.diag(np.exp(2 * ls[i])) @ R[i].T
        np.testing.assert_allclose(cov[i], ref, atol=1e-12)
        np.testing.assert_allclose(R[i] @ R[i].T, np.eye(3), atol=1e-12)


def test_scene_bounds_single_static():
    cs = ComponentSet.from_components([Component(log_scale=np.full(3, math.log(0.1)))])
    lo, hi = scene_bounds(cs, [0.0])
    np.testing.assert_allclose(lo, -0.3)
    np.testing.assert_allclose(hi, 0.3)


def test_scene_bounds_union():
    cs = ComponentSet.from_components([Component(mu=np.array([x, 0, 0.0])) for x in (-1.0, 1.0)])
    lo, hi = scene_bounds(cs, [0.0])
    assert lo[0] == pytest.approx(-1.3) and hi[0] == pytest.approx(1.3)


def test_scene_bounds_moving_component():
    c = Component(v=np.array([1.0, 0, 0]))
    cs = ComponentSet.from_components([c])
    lo, hi = scene_bounds(cs, [0.0, 1.0])
    for t in (0.0, 1.0):
        m = mean_at_time(c, t)
        assert np.all(lo <= m - 0.3 + 1e-12) and np.all(hi >= m + 0.3 - 1e-12)
    assert hi[0] == pytest.approx(1.3)


def test_scene_bounds_needs_times():
    with pytest.raises(ValueError):
        scene_bounds(ComponentSet.from_components([Component()]), [])


@pytest.mark.parametrize("kind", ["gaussian", "student-t"])
def test_scene_round_trip_full_precision(tmp_path, rng, kind):
    cs = random_set(rng, 7, kind, deg=2)
    save_scene(tmp_path / "s.json", cs, {"note": "x"})
    back = load_scene(tmp_path / "s.json")
    assert back.kernel_kind is KernelKind.parse(kind) and back.sh_degree == 2
    for name, arr in cs.params().items():
        assert np.array_equal(getattr(back, name), arr), name
    header = json.loads((tmp_path / "s.json").read_text())
    assert {"format_version", "kernel_kind", "sh_degree", "count"} <= set(header["header"])


def test_manifest_round_trip(tmp_path, rng):
    m = random_manifest(rng)
    pix = {f.key: f.pixels.copy() for f in m.frames}
    save_manifest(tmp_path / "m.json", m)
    back = load_manifest(tmp_path / "m.json")
    assert [f.key for f in back.frames] == [f.key for f in m.frames]
    for a, b in zip(back.cameras, m.cameras):
        assert a.to_dict() == b.to_dict()
    for f in back.frames:
        # 8-bit interchange: within half a quantization step
        assert np.max(np.abs(back.load_image(f) - pix[f.key])) <= 0.5 / 255 + 1e-12
    assert back.validate() == []


def test_manifest_invariants():
    cams = [CameraModel(0, 10, 10, 4, 4, 8, 8, is_holdout=True), CameraModel(1, 10, 10, 4, 4, 8, 8)]
    m = DatasetManifest(cams, [FrameObservation(1, 0.5), FrameObservation(0, 0.0)], 1.0, 30)
    assert [f.key for f in m.frames] == [(0, 0.0), (1, 0.5)]
    assert m.validate() == []
    assert m.holdout.id == 0 and [c.id for c in m.training_cameras] == [1]
    bad = DatasetManifest(cams, [FrameObservation(7, 0.0), FrameObservation(1, 3.0)], 1.0, 30)
    errs = bad.validate()
    assert any("unknown camera" in e for e in errs) and any("outside" in e for e in errs)
    two = DatasetManifest([CameraModel(0, 10, 10, 4, 4, 8, 8, is_holdout=True),
                           CameraModel(1, 10, 10, 4, 4, 8, 8, is_holdout=True)], [], 1.0, 30)
    assert any("holdout" in e for e in two.validate())


def test_camera_validation():
    assert CameraModel(0, 10, 10, 4, 4, 8, 8).validate() == []
    assert CameraModel(0, -1, 10, 9, 4, 8, 8).validate()


def test_look_at_points_forward():
    eye = np.array([3.0, 1.0, 2.0])
    R, t = look_at(eye, [0, 0, 0])
    cam = CameraModel(0, 10, 10, 4, 4, 8, 8, R, t)
    np.testing.assert_allclose(cam.center, eye, atol=1e-12)
    p = R @ np.zeros(3) + t
    assert p[2] == pytest.approx(np.linalg.norm(eye)) and abs(p[0]) < 1e-12 and abs(p[1]) < 1e-12
    assert np.linalg.det(R) == pytest.approx(1.0)
