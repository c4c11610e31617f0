import math

import numpy as np
import pytest
from scipy.optimize import minimize

from graphixs import renderer
from graphixs.core import CameraModel, Component, ComponentSet, look_at
from graphixs.kernels import SH_C0, Splat2D, eval_splat_2d, project
from graphixs.renderer import (GradientRecord, RenderConfig, cast_ray, cast_rays, composite, cull_per_image,
                               intersect_per_pixel, render_backward, render_image, render_image_bruteforce)

from conftest import fd_mismatches, random_set


def scene_camera(rng, size=64):
    R, t = look_at(rng.normal(size=3) * 0.3 + [0, -3, 1], [0, 0, 0])
    f = 1.2 * size
    return CameraModel(0, f, f, size / 2, size / 2, size, size, R, t)


# -- rays ---------------------------------------------------------------------

def test_on_axis_ray():
    cam = CameraModel(0, 10.0, 10.0, 32.5, 32.5, 64, 64)
    r = cast_ray(cam, (32, 32), 0.0)
    np.testing.assert_allclose(r.dir, [0, 0, 1], atol=1e-15)
    np.testing.assert_allclose(r.origin, 0.0)


def test_unit_tangent_ray():
    cam = CameraModel(0, 10.0, 10.0, 32.5, 32.5, 64, 64)
    r = cast_ray(cam, (42, 32), 0.0)
    np.testing.assert_allclose(r.dir, np.array([1, 0, 1]) / math.sqrt(2), atol=1e-15)


def test_ray_closed_form(rng):
    for _ in range(20):
        cam = scene_camera(rng)
        px = (int(rng.integers(0, 64)), int(rng.integers(0, 64)))
        r = cast_ray(cam, px, 0.3)
        K = np.array([[cam.fx, 0, cam.cx], [0, cam.fy, cam.cy], [0, 0, 1]])
        d = cam.R.T @ np.linalg.solve(K, [px[0] + 0.5, px[1] + 0.5, 1.0])
        np.testing.assert_allclose(r.dir, d / np.linalg.norm(d), atol=1e-12)
        np.testing.assert_allclose(r.origin, -cam.R.T @ cam.t, atol=1e-12)
        assert abs(np.linalg.norm(r.dir) - 1) <= 1e-12
        o, ds = cast_rays(cam, np.array([px]))
        np.testing.assert_allclose(ds[0], r.dir, atol=1e-14)


def test_ray_out_of_bounds():
    cam = CameraModel(0, 10.0, 10.0, 4, 4, 8, 8)
    with pytest.raises(ValueError):
        cast_ray(cam, (8, 0), 0.0)
    with pytest.raises(ValueError):
        cast_ray(cam, (0, -1), 0.0)


# -- culling and intersection --------------------------------------------------

def _front_component(**kw):
    return Component(mu=np.array([0.0, 0, 5]), opacity_logit=3.0, **kw)


def test_cull_behind_and_faint():
    cam = CameraModel(0, 50.0, 50.0, 32, 32, 64, 64)
    cs = ComponentSet.from_components([
        _front_component(),
        Component(mu=np.array([0.0, 0, -5]), opacity_logit=3.0),
        Component(mu=np.array([0.0, 0, 5]), opacity_logit=math.log(0.001 / 0.999)),
    ])
    assert [s.component_index for s in cull_per_image(cs, cam, 0.0)] == [0]


def _min_m_over_image(center, conic, w, h):
    res = minimize(lambda p: (p - center) @ conic @ (p - center), np.clip(center, [0.5, 0.5], [w - 0.5, h - 0.5]),
                   bounds=[(0.5, w - 0.5), (0.5, h - 0.5)], method="L-BFGS-B", options={"ftol": 1e-15, "gtol": 1e-12})
    return res.fun


def test_cull_matches_exhaustive_check(rng):
    for seed in range(5):
        cs = random_set(rng, 60, spread=1.5)
        cs.opacity_logit[:] = rng.normal(-2, 2, 60)
        cam = scene_camera(rng, 32)
        kept = {s.component_index for s in cull_per_image(cs, cam, 0.0)}
        proj = project(cs, cam, 0.0)
        for i in range(len(cs)):
            if proj.depth[i] <= 0.01 or proj.opacity[i] < 1 / 255:
                assert i not in kept
                continue
            m_min = _min_m_over_image(proj.center[i], proj.conic[i], 32, 32)
            m_cut = 2 * math.log(proj.opacity[i] * 255)
            if abs(m_min - m_cut) > 1e-6 * max(1, m_cut):
                assert (i in kept) == (m_min <= m_cut), i


def _splat(depth, idx, center=(0.0, 0.0)):
    return Splat2D(np.array(center), np.eye(2) * 4, depth, np.full(3, 0.5), 0.9, idx)


def test_intersect_far_pixel_empty():
    assert intersect_per_pixel([_splat(1, 0)], (100.0, 100.0)) == []


def test_intersect_depth_order_and_ties():
    hits = intersect_per_pixel([_splat(5.0, 0), _splat(2.0, 1)], (0.5, 0.5))
    assert [h[0].depth for h in hits] == [2.0, 5.0]
    hits = intersect_per_pixel([_splat(3.0, 7), _splat(3.0, 2)], (0.5, 0.5))
    assert [h[0].component_index for h in hits] == [2, 7]


# -- compositing -----------------------------------------------------------------

def test_composite_single_clamped():
    c = np.array([0.2, 0.4, 0.6])
    rgb, T = composite([(1.0, c, 1.0)])
    np.testing.assert_allclose(rgb, 0.999 * c)
    assert T == pytest.approx(0.001)


def test_composite_two_entries():
    c1, c2 = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
    rgb, _ = composite([(1.0, c1, 0.5), (1.0, c2, 0.999)])
    np.testing.assert_allclose(rgb, 0.5 * c1 + 0.4995 * c2)


def test_composite_naive_oracle(rng):
    entries = [(rng.uniform(0.1, 1), rng.uniform(0, 1, 3), rng.uniform(0, 0.3)) for _ in range(20)]
    rgb, T = composite(entries)
    ref, Tr = np.zeros(3), 1.0
    for resp, col, op in entries:
        a = min(op * resp, 0.999)
        ref = ref + col * a * Tr
        Tr = Tr * (1 - a)
        if Tr < 1e-4:
            break
    np.testing.assert_allclose(rgb, ref, atol=1e-12)
    assert T == pytest.approx(Tr, abs=1e-12)


# -- images ------------------------------------------------------------------------

def test_empty_scene_is_background():
    cam = CameraModel(0, 50.0, 50.0, 16, 16, 32, 32)
    cs = ComponentSet.from_components([Component(mu=np.array([0.0, 0, -3]))])
    img = render_image(cs, cam, 0.0, RenderConfig(background=(0.2, 0.3, 0.4)))
    assert np.all(img == np.array([0.2, 0.3, 0.4]))


def test_huge_opaque_component_fills_view():
    cam = CameraModel(0, 20.0, 20.0, 16, 16, 32, 32)
    sh = np.zeros((1, 3))
    sh[0] = (np.array([0.8, 0.3, 0.1]) - 0.5) / SH_C0
    c = Component(mu=np.array([0.0, 0, 5]), log_scale=np.full(3, math.log(1000.0)), opacity_logit=10.0, sh=sh)
    img = render_image(ComponentSet.from_components([c]), cam, 0.0)
    np.testing.assert_allclose(img, np.broadcast_to([0.8, 0.3, 0.1], img.shape) * 0.999, atol=1e-3)


@pytest.mark.parametrize("kind", ["gaussian", "student-t"])
def test_tiled_matches_bruteforce(rng, kind):
    for _ in range(3):
        cs = random_set(rng, 50, kind, deg=2, scale=(0.03, 0.3))
        cam = scene_camera(rng)
        cfg = RenderConfig(background=tuple(rng.uniform(0, 1, 3)))
        a = render_image(cs, cam, 0.05, cfg)
        b = render_image_bruteforce(cs, cam, 0.05, cfg)
        assert np.max(np.abs(a - b)) <= 1e-6
        assert a.min() >= 0 and a.max() <= 1


def test_bruteforce_permutation_invariant(rng):
    cs = random_set(rng, 20)
    cam = scene_camera(rng, 24)
    perm = rng.permutation(20)
    shuffled = ComponentSet(**{k: v[perm] for k, v in cs.params().items()}, kernel_kind=cs.kernel_kind,
                            sh_degree=cs.sh_degree)
    # equal depths are impossible with continuous random means, so the depth sort canonicalizes order
    assert np.array_equal(render_image_bruteforce(cs, cam, 0.0), render_image_bruteforce(shuffled, cam, 0.0))


def test_tile_size_and_threads_do_not_matter(rng, monkeypatch):
    cs = random_set(rng, 40, scale=(0.03, 0.3))
    cam = scene_camera(rng, 48)
    base = render_image(cs, cam, 0.0)
    assert np.array_equal(base, render_image(cs, cam, 0.0))
    for tile in (8, 32):
        assert np.max(np.abs(render_image(cs, cam, 0.0, RenderConfig(tile_size=tile)) - base)) <= 1e-12
    up = rng.normal(size=base.shape)
    g0 = render_backward(cs, cam, 0.0, up).flat()
    monkeypatch.setenv("GRAPHIXS_NUM_THREADS", "4")
    assert np.array_equal(render_image(cs, cam, 0.0), base)
    assert np.array_equal(render_backward(cs, cam, 0.0, up).flat(), g0)


@pytest.mark.skipif(renderer._compiled is None, reason="compiled rasterizer not built")
def test_backends_agree(rng):
    cs = random_set(rng, 30, "student-t", scale=(0.03, 0.3))
    cam = scene_camera(rng, 40)
    up = rng.normal(size=(40, 40, 3))
    try:
        renderer.set_backend("python")
        img_py, g_py = render_image(cs, cam, 0.0), render_backward(cs, cam, 0.0, up).flat()
    finally:
        renderer.set_backend("compiled")
    img_c, g_c = render_image(cs, cam, 0.0), render_backward(cs, cam, 0.0, up).flat()
    assert np.max(np.abs(img_py - img_c)) <= 1e-12
    np.testing.assert_allclose(g_py, g_c, rtol=1e-9, atol=1e-12)


# -- backward ------------------------------------------------------------------------

def test_zero_upstream_zero_gradient(rng):
    cs = random_set(rng, 10)
    cam = scene_camera(rng, 16)
    g = render_backward(cs, cam, 0.0, np.zeros((16, 16, 3)))
    assert not np.any(g.flat())


def test_nonfinite_upstream_rejected(rng):
    cs = random_set(rng, 3)
    cam = scene_camera(rng, 8)
    up = np.zeros((8, 8, 3))
    up[0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        render_backward(cs, cam, 0.0, up)


def test_color_gradient_is_blend_weight():
    cam = CameraModel(0, 20.0, 20.0, 8, 8, 16, 16)
    sh = np.zeros((1, 3))
    c = Component(mu=np.array([0.0, 0, 4]), log_scale=np.full(3, math.log(0.3)), opacity_logit=0.2, sh=sh)
    cs = ComponentSet.from_components([c])
    up = np.zeros((16, 16, 3))
    up[9, 6, 1] = 1.0
    g = render_backward(cs, cam, 0.0, up)
    s = cull_per_image(cs, cam, 0.0)[0]
    w = min(s.eff_opacity * eval_splat_2d(s, (6.5, 9.5)), 0.999)
    assert g["sh"][0, 0, 1] == pytest.approx(w * SH_C0, rel=1e-12)
    assert g["sh"][0, 0, 0] == 0.0


@pytest.mark.parametrize("kind", ["gaussian", "student-t"])
def test_backward_finite_differences(rng, kind):
    cs = random_set(rng, 6, kind, deg=2)
    cam = scene_camera(rng, 20)
    cam.fx = cam.fy = 15.0
    up = rng.normal(size=(20, 20, 3))
    g = render_backward(cs, cam, 0.04, up)
    f = lambda s: float(np.sum(up * render_image(s, cam, 0.04)))
    assert fd_mismatches(f, cs, g) == []


def test_culled_component_gets_zero_gradient(rng):
    cs = random_set(rng, 5)
    cs.mu[2] = [0.0, -10.0, 0.0]  # behind the camera
    cam = scene_camera(rng, 16)
    proj = project(cs, cam, 0.0)
    assert not proj.visible[2]
    g = render_backward(cs, cam, 0.0, rng.normal(size=(16, 16, 3)))
    for name in g.arrays:
        assert not np.any(g[name][2]), name


def test_gradient_record_check_finite_names_field(rng):
    cs = random_set(rng, 3)
    rec = GradientRecord.zeros(cs)
    rec.arrays["v"][1, 0] = np.inf
    with pytest.raises(FloatingPointError, match=r"'v'.*\[1\]"):
        rec.check_finite()
