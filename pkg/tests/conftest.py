import numpy as np
import pytest

from graphixs.core import CameraModel, ComponentSet, DatasetManifest, FrameObservation, look_at


def random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_set(rng, n, kind="gaussian", deg=1, spread=0.4, scale=(0.1, 0.3), dynamic=True):
    z = (lambda shape: rng.normal(0, 0.2, shape)) if dynamic else (lambda shape: np.zeros(shape))
    return ComponentSet(
        mu=rng.uniform(-spread, spread, (n, 3)), rot=random_quats(rng, n),
        log_scale=np.log(rng.uniform(*scale, (n, 3))), opacity_logit=rng.normal(0, 0.5, n),
        sh=rng.normal(0, 0.2, (n, (deg + 1) ** 2, 3)), g=rng.uniform(0, 0.1, n), u=rng.uniform(0.5, 2, n),
        v=z((n, 3)), a=z((n, 3)), j=z((n, 3)), s=z((n, 3)),
        nu=rng.uniform(2, 8, n) if kind == "student-t" else np.full(n, 1e6),
        kernel_kind=kind, sh_degree=deg)


def ring_cameras(n, size=16, radius=3.0, f=None):
    f = f if f is not None else 1.25 * size
    cams = []
    for i in range(n):
        ang = 0.3 + 2 * np.pi * i / n
        R, t = look_at([radius * np.cos(ang), radius * np.sin(ang), 1.2], [0, 0, 0])
        cams.append(CameraModel(i, f, f, size / 2, size / 2, size, size, R, t, fps=30.0, is_holdout=(i == 0)))
    return cams


def random_manifest(rng, n_cams=3, n_frames=3, size=16):
    cams = ring_cameras(n_cams, size)
    frames = [FrameObservation(c.id, k / 30, pixels=rng.uniform(0, 1, (size, size, 3)))
              for c in cams for k in range(n_frames)]
    return DatasetManifest(cams, frames, (n_frames - 1) / 30, 30.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def round_trip():
    from graphixs.synth import round_trip_spec, synth_scene
    return synth_scene(round_trip_spec())


def fd_mismatches(f, cs, grads, fields=None, rel=1e-3, abs_tol=1e-7, step=1e-6):
    """Central finite differences of scalar f over every entry of the given fields.

    Returns a list of (field, index, analytic, numeric) for entries outside the tolerance.
    """
    from graphixs.core import FIELDS
    bad = []
    for name in fields or FIELDS:
        arr = getattr(cs, name)
        for idx in np.ndindex(arr.shape):
            h = step * max(1.0, abs(arr[idx]))
            p, m = cs.copy(), cs.copy()
            getattr(p, name)[idx] += h
            getattr(m, name)[idx] -= h
            fd = (f(p) - f(m)) / (2 * h)
            an = grads[name][idx]
            err = abs(fd - an)
            if not (err <= rel * max(abs(fd), abs(an)) or err <= abs_tol):
                bad.append((name, idx, an, fd))
    return bad


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = {}


def record_verdict(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
