"""Time the numba kernels against the numpy reference implementations.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]

Each kernel is called once per backend before timing so that JIT
compilation is excluded; reported numbers are the median of N repeats.
"""

import argparse
import time

import numpy as np
from scipy.ndimage import gaussian_filter

from deftrack import _kernels_numpy as knp

try:
    from deftrack import _kernels_numba as knb
except ImportError:
    knb = None


def make_image(rng, shape=(480, 640)):
    img = gaussian_filter(rng.uniform(0.0, 255.0, shape), 2.0)
    lo, hi = img.min(), img.max()
    return 255.0 * (img - lo) / (hi - lo)


def median_time(fn, repeats):
    fn()  # warmup: JIT compile, touch caches
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def build_cases(rng):
    img = make_image(rng)
    gy, gx = np.gradient(img)
    ref = knp.bilinear_patch(img, 320.3, 240.7, 7)
    centers = rng.uniform(40.0, 400.0, (200, 2))

    dirs = rng.normal(size=(2000, 3))
    dirs[:, 2] = np.abs(dirs[:, 2]) + 0.5
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = np.array([0.0, 0.0, 30.0])

    pts = np.column_stack([rng.uniform(-20, 20, 5000),
                           rng.uniform(-20, 20, 5000),
                           rng.uniform(0, 200, 5000)])
    m = 24
    tdirs = rng.normal(size=(m, 3))
    tdirs /= np.linalg.norm(tdirs, axis=1, keepdims=True)
    tfreqs = rng.uniform(0.2, 2.0, m)
    tphases = rng.uniform(0.0, 2.0 * np.pi, m)
    tamps = rng.uniform(0.5, 1.5, m) / m

    def case_bilinear(k):
        def run():
            for cx, cy in centers:
                k.bilinear_patch(img, cx, cy, 7)
        return run

    def case_lk(k):
        def run():
            for cx, cy in centers[:50]:
                k.lk_refine(ref, img, gx, gy, cx, cy, 1.0, 0.0, 20, 1e-3, 1e8)
        return run

    def case_shi(k):
        return lambda: k.shi_tomasi_response(img, 2)

    def case_raycast(k):
        return lambda: k.raycast_tube(dirs, origin, 25.0, 200.0, 4.0, 0.3,
                                      0.04, 0.25, 120.0)

    def case_texture(k):
        return lambda: k.texture_eval(pts, tdirs, tfreqs, tphases, tamps,
                                      128.0, 40.0)

    return [
        ("bilinear_patch (200 patches, 15x15)", case_bilinear),
        ("lk_refine (50 starts, 20 iters)", case_lk),
        ("shi_tomasi_response (480x640)", case_shi),
        ("raycast_tube (2000 rays)", case_raycast),
        ("texture_eval (5000 points, 24 waves)", case_texture),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    cases = build_cases(rng)

    if knb is None:
        print("numba backend unavailable; timing numpy only")
    name_w = max(len(name) for name, _ in cases)
    header = f"{'kernel':<{name_w}}  {'numpy':>10}"
    if knb is not None:
        header += f"  {'numba':>10}  {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, factory in cases:
        t_np = median_time(factory(knp), args.repeats)
        line = f"{name:<{name_w}}  {1e3 * t_np:8.2f}ms"
        if knb is not None:
            t_nb = median_time(factory(knb), args.repeats)
            line += f"  {1e3 * t_nb:8.2f}ms  {t_np / t_nb:7.1f}x"
        print(line)


if __name__ == "__main__":
    main()
