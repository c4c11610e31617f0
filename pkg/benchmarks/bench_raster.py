"""Forward and backward rasterizer timings, compiled backend vs the pure-Python fallback.

    python benchmarks/bench_raster.py [--components 200] [--size 64] [--repeat 5]
"""
import argparse
import time

import numpy as np

from graphixs import renderer
from graphixs.core import CameraModel, ComponentSet, look_at
from graphixs.renderer import render_backward, render_image


def random_scene(n, rng, kind="gaussian"):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    z = lambda: rng.normal(0, 0.1, (n, 3))
    return ComponentSet(mu=rng.uniform(-0.6, 0.6, (n, 3)), rot=q, log_scale=np.log(rng.uniform(0.03, 0.15, (n, 3))),
                        opacity_logit=rng.normal(0, 1, n), sh=rng.normal(0, 0.3, (n, 4, 3)),
                        g=rng.uniform(0, 1, n), u=rng.uniform(0.5, 2, n), v=z(), a=z(), j=z(), s=z(),
                        nu=rng.uniform(2, 8, n) if kind == "student-t" else np.full(n, 1e6),
                        kernel_kind=kind, sh_degree=1)


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--components", type=int, default=200)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--kernel", default="gaussian", choices=["gaussian", "student-t"])
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    cs = random_scene(args.components, rng, args.kernel)
    R, t = look_at([0.5, -3.0, 1.0], [0, 0, 0])
    f = 1.2 * args.size
    cam = CameraModel(0, f, f, args.size / 2, args.size / 2, args.size, args.size, R, t)
    up = rng.normal(size=(args.size, args.size, 3))

    backends = ["python"] + (["compiled"] if renderer._compiled is not None else [])
    rows = {}
    for name in backends:
        renderer.set_backend(name)
        fwd = best_of(lambda: render_image(cs, cam, 0.3), args.repeat)
        bwd = best_of(lambda: render_backward(cs, cam, 0.3, up), args.repeat)
        rows[name] = (fwd, bwd)
    renderer.set_backend(backends[-1])

    print(f"{args.components} {args.kernel} components, {args.size}x{args.size}, best of {args.repeat}")
    print(f"{'backend':10s} {'forward ms':>12s} {'backward ms':>12s}")
    for name, (fwd, bwd) in rows.items():
        print(f"{name:10s} {1e3 * fwd:12.2f} {1e3 * bwd:12.2f}")
    if "compiled" in rows:
        p, c = rows["python"], rows["compiled"]
        print(f"{'speedup':10s} {p[0] / c[0]:11.1f}x {p[1] / c[1]:11.1f}x")
    else:
        print("compiled extension not built; run `python setup.py build_ext --inplace`")


if __name__ == "__main__":
    main()
