import json
import math

import numpy as np
import pytest
import torch
from pytorch_msssim import ms_ssim as torch_ms_ssim
from scipy.ndimage import gaussian_filter

from graphixs.core import Component, ComponentSet, DatasetManifest, FrameObservation
from graphixs.metrics import (MS_SSIM_WEIGHTS, PSNR_CAP, EvalReport, dssim, evaluate, holdout_psnr, ms_ssim,
                              ms_ssim_levels, psnr)
from graphixs.renderer import render_image

from conftest import random_manifest, random_set


def reference_ms_ssim(a, b, weights=None):
    ta = torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)[None]))
    tb = torch.from_numpy(np.ascontiguousarray(b.transpose(2, 0, 1)[None]))
    return float(torch_ms_ssim(ta, tb, data_range=1.0, size_average=True, weights=weights))


def smooth_pair(rng, h, w, sigma=4.0, noise=0.08):
    a = gaussian_filter(rng.uniform(0, 1, (h, w, 3)), (sigma, sigma, 0))
    a = (a - a.min()) / (a.max() - a.min())
    b = np.clip(a + gaussian_filter(rng.normal(0, noise, (h, w, 3)), (1, 1, 0)), 0, 1)
    return a, b


# -- PSNR -------------------------------------------------------------------------------------

def test_psnr_examples(rng):
    a = rng.uniform(0.2, 0.8, (8, 8, 3))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    b = rng.uniform(0, 1, (8, 8, 3))
    assert psnr(a, b) == pytest.approx(-10 * math.log10(np.mean((a - b) ** 2)), abs=1e-9)
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ValueError):
        psnr(a, a[:4])


def test_psnr_monotone_in_noise(rng):
    a = rng.uniform(0, 1, (16, 16, 3))
    n = rng.uniform(-1, 1, a.shape)
    vals = [psnr(a, a + amp * n) for amp in (0.01, 0.05, 0.2)]
    assert vals[0] > vals[1] > vals[2]


# -- MS-SSIM ----------------------------------------------------------------------------------

def test_scale_count():
    assert ms_ssim_levels(176, 176) == 5
    assert ms_ssim_levels(32, 32) == 2
    assert ms_ssim_levels(11, 40) == 1
    with pytest.raises(ValueError):
        ms_ssim_levels(10, 64)


def test_ms_ssim_trivial(rng):
    a = rng.uniform(0, 1, (32, 32, 3))
    assert ms_ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    for size in (11, 32, 64):
        c = np.full((size, size, 3), 0.37)
        assert ms_ssim(c, c) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        ms_ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


@pytest.mark.parametrize("shape", [(176, 176), (181, 190), (200, 177)])
def test_ms_ssim_reference(rng, shape):
    a, b = smooth_pair(rng, *shape)
    assert ms_ssim(a, b) == pytest.approx(reference_ms_ssim(a, b), abs=1e-4)
    assert ms_ssim(a, 1 - a) == pytest.approx(reference_ms_ssim(a, 1 - a), abs=1e-4)
    noise = rng.uniform(0, 1, shape + (3,))
    assert ms_ssim(noise, 1 - noise) == pytest.approx(reference_ms_ssim(noise, 1 - noise), abs=1e-4)


def test_fewer_scales_reference(rng):
    a, b = smooth_pair(rng, 180, 180)
    for levels in (2, 3):
        w = MS_SSIM_WEIGHTS[:levels] / MS_SSIM_WEIGHTS[:levels].sum()
        assert ms_ssim(a, b, levels) == pytest.approx(reference_ms_ssim(a, b, list(w)), abs=1e-4)


def test_dssim_relation(rng):
    a = rng.uniform(0, 1, (33, 40, 3))
    assert dssim(a, a) == pytest.approx(0.0, abs=1e-12)
    for _ in range(5):
        a, b = smooth_pair(rng, 40, 33)
        assert dssim(a, b) == (1 - ms_ssim(a, b)) / 2
        assert dssim(a, b) == pytest.approx(dssim(b, a), abs=1e-12)
    assert (1 - 0.97) / 2 == pytest.approx(0.015)


# -- evaluation --------------------------------------------------------------------------------

def self_manifest(rng, cs):
    man = random_manifest(rng, n_cams=3, n_frames=3)
    for f in man.frames:
        f.pixels = render_image(cs, man.camera(f.camera_id), f.timestamp)
    return man


def test_self_evaluation(rng):
    cs = random_set(rng, 6)
    man = self_manifest(rng, cs)
    rep = evaluate(cs, man)
    assert len(rep.frames) == 3
    assert all(f.psnr == PSNR_CAP and f.dssim == pytest.approx(0.0, abs=1e-12) for f in rep.frames)
    assert holdout_psnr(cs, man) == PSNR_CAP


def test_two_frame_toy(tmp_path):
    from conftest import ring_cameras
    cams = ring_cameras(2, size=12)
    frames = [FrameObservation(0, 0.0, pixels=np.full((12, 12, 3), 0.1)),
              FrameObservation(0, 0.5, pixels=np.full((12, 12, 3), 0.2)),
              FrameObservation(1, 0.0, pixels=np.zeros((12, 12, 3)))]
    man = DatasetManifest(cams, frames, 0.5, 2.0, metadata={"degradations": [{"kind": "faulty"}]})
    invisible = ComponentSet.from_components([Component(mu=np.array([0.0, 0, 0]), opacity_logit=-700.0)])
    rep = evaluate(invisible, man, config={"scene": "toy"})
    assert [f.psnr for f in rep.frames] == pytest.approx([20.0, 10 * math.log10(25.0)], abs=1e-9)
    assert rep.mean_psnr == pytest.approx(np.mean([f.psnr for f in rep.frames]), abs=1e-12)
    assert rep.mean_dssim == pytest.approx(np.mean([f.dssim for f in rep.frames]), abs=1e-12)
    assert rep.config == {"degradations": [{"kind": "faulty"}], "scene": "toy"}
    rep.save(tmp_path / "rep.json")
    back = json.loads((tmp_path / "rep.json").read_text())
    assert back["mean_psnr"] == rep.mean_psnr and back["lpips"] == "unavailable"
    rows = (tmp_path / "rep.csv").read_text().splitlines()
    assert rows[0] == "timestamp,psnr,dssim,lpips" and rows[-1].startswith("mean,")


def test_report_sorted_by_time():
    from graphixs.metrics import FrameScore
    rep = EvalReport.from_frames([FrameScore(0.5, 20.0, 0.1), FrameScore(0.0, 30.0, 0.3)])
    assert [f.timestamp for f in rep.frames] == [0.0, 0.5]
    assert rep.mean_psnr == 25.0 and rep.mean_dssim == pytest.approx(0.2)


def test_evaluate_needs_holdout_frames(rng):
    man = random_manifest(rng)
    training_only = man.with_frames(man.training_frames())
    with pytest.raises(ValueError):
        evaluate(random_set(rng, 2), training_only)
