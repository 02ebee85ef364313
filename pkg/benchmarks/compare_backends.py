"""Compare the compiled compositing backend against the pure-Python fallback.

Run:  python benchmarks/compare_backends.py

Renders/backprops the same scenes through both kernel implementations,
verifies the outputs are bit-identical, and prints per-frame timings.
"""

import time

import numpy as np

from flod.camera import look_at
from flod.model import GaussianLevelSet
from flod.rasterizer import get_kernels, render, render_backward


def make_scene(rng, n):
    return GaussianLevelSet(
        positions=rng.uniform(-0.45, 0.45, (n, 3)),
        scale_params=rng.uniform(np.log(0.03), np.log(0.25), (n, 3)),
        rotations=rng.normal(size=(n, 4)),
        opacity_params=rng.uniform(-1.5, 1.5, n),
        colors=rng.uniform(0, 1, (n, 3)),
        s_min=0.0, level=1,
    )


def time_call(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0


def main():
    try:
        get_kernels("cython")
    except ImportError:
        print("compiled backend not built; run `pip install -e . --no-build-isolation`")
        return 1

    rng = np.random.default_rng(0)
    cases = [(100, 64), (500, 64), (2000, 128), (10000, 128)]
    print(f"{'gaussians':>10} {'image':>7} {'fwd cy (ms)':>12} {'fwd py (ms)':>12} "
          f"{'speedup':>8} {'bwd cy (ms)':>12} {'bwd py (ms)':>12} {'speedup':>8}")
    for n, size in cases:
        scene = make_scene(rng, n)
        cam = look_at((0, 0.3, -2.8), (0, 0, 0), fx=float(size),
                      width=size, height=size)
        upstream = rng.normal(size=(size, size, 3))
        out_cy = render(scene, cam, backend="cython")
        out_py = render(scene, cam, backend="python")
        assert np.array_equal(out_cy.rgb, out_py.rgb), "backends disagree!"
        g_cy = render_backward(scene, cam, (0, 0, 0), upstream, backend="cython")
        g_py = render_backward(scene, cam, (0, 0, 0), upstream, backend="python")
        assert np.array_equal(g_cy.positions, g_py.positions), "backends disagree!"

        repeats = 3 if n >= 2000 else 5
        fwd_cy = time_call(lambda: render(scene, cam, backend="cython"), repeats)
        fwd_py = time_call(lambda: render(scene, cam, backend="python"),
                           1 if n >= 2000 else 2)
        bwd_cy = time_call(lambda: render_backward(scene, cam, (0, 0, 0), upstream,
                                                   backend="cython"), repeats)
        bwd_py = time_call(lambda: render_backward(scene, cam, (0, 0, 0), upstream,
                                                   backend="python"),
                           1 if n >= 2000 else 2)
        print(f"{n:>10} {size:>4}px {fwd_cy:>12.2f} {fwd_py:>12.1f} "
              f"{fwd_py / fwd_cy:>7.1f}x {bwd_cy:>12.2f} {bwd_py:>12.1f} "
              f"{bwd_py / bwd_cy:>7.1f}x")
    print("\nall outputs bit-identical across backends")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
