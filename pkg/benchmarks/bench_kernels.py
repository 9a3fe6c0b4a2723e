"""Time the numba loop kernels against their numpy counterparts.

Usage: python benchmarks/bench_kernels.py [--rings 100] [--around 50] [--repeat 20]

Both variants are called directly, so the result does not depend on
GLASS_NO_NUMBA. The first numba call (compilation) is excluded.
"""
import argparse
import time

import numpy as np

from glass import kernels
from glass._accel import HAVE_NUMBA
from glass.arap import ArapContext
from glass.datasets import tube


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rings", type=int, default=100)
    ap.add_argument("--around", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed")

    mesh, _ = tube(args.rings, args.around)
    ctx = ArapContext(mesh)
    rng = np.random.default_rng(0)
    W = mesh.vertices + 0.01 * rng.standard_normal(mesh.vertices.shape)
    S = kernels._covariances_np(ctx.rest_vertices, W, ctx.ei, ctx.ej, ctx.w)
    R = kernels._rotations_np(S)
    n_par = 200_000
    p, g = rng.standard_normal(n_par), rng.standard_normal(n_par)
    m, v = np.zeros(n_par), np.zeros(n_par)

    calls = {
        "covariances": lambda f: f(ctx.rest_vertices, W, ctx.ei, ctx.ej, ctx.w),
        "rotations": lambda f: f(S),
        "energy": lambda f: f(ctx.rest_vertices, W, R, ctx.ei, ctx.ej, ctx.w),
        "gradient": lambda f: f(ctx.rest_vertices, W, R, ctx.ei, ctx.ej, ctx.w),
        "rhs": lambda f: f(ctx.rest_vertices, R, ctx.ei, ctx.ej, ctx.w),
        "adam": lambda f: f(p, g, m, v, 1e-9, 0.9, 0.999, 0.1, 0.001, 1e-8, 1.0),
    }
    print(f"mesh: {mesh.n_vertices} vertices, {len(ctx.ei)} edges; adam: {n_par} parameters")
    print(f"{'kernel':<12} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, call in calls.items():
        t_np = best_of(lambda: call(kernels.NUMPY_KERNELS[name]), args.repeat)
        t_nb = best_of(lambda: call(kernels.LOOP_KERNELS[name]), args.repeat)
        print(f"{name:<12} {1e3 * t_np:>10.3f} {1e3 * t_nb:>10.3f} {t_np / t_nb:>8.2f}")


if __name__ == "__main__":
    main()
