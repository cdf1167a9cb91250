"""Compiled vs numpy kernels.

    python benchmarks/bench_kernels.py [--points 2000] [--repeat 50]

Prints the median wall time per call of each backend and the speed-up.
The two backends are also checked for agreement on every input.
"""
import argparse
import statistics
import time

import numpy as np

from dynslam import kernels
from dynslam.geometry import CameraModel, exp_se3


def _case(n, seed):
    rng = np.random.default_rng(seed)
    cam = CameraModel(718.0, 718.0, 607.0, 185.0, 1242, 375)
    m = np.column_stack([rng.uniform(-10, 10, n), rng.uniform(-2, 2, n), rng.uniform(5, 40, n)])
    T = exp_se3(rng.normal(size=6) * 0.02)
    uv = cam.project_points(m @ T.R.T + T.t)
    base = uv - rng.normal(size=(n, 2)) * 3
    phi = uv - base + rng.normal(size=(n, 2))
    phi_hat = phi + rng.normal(size=(n, 2))
    params = (cam.fx, cam.fy, cam.cx, cam.cy, 1.0, 1.0, 2.447747, 1.0)
    return T.R, T.t, m, base, phi, phi_hat, params


def _time(fn, repeat):
    ts = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t)
    return statistics.median(ts)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    if kernels.BACKEND != "cython":
        raise SystemExit("compiled extension not available (built? DYNSLAM_PURE set?)")
    R, t, m, base, phi, phi_hat, params = _case(args.points, 0)
    rng = np.random.default_rng(1)
    px = args.points * 20
    u, v = rng.integers(-5, 1247, px), rng.integers(-5, 380, px)
    depth = rng.choice(np.linspace(1, 50, 200), px)

    jobs = {
        "schur_system": (lambda: kernels.schur_system_py(R, t, m, base, phi, phi_hat, params, 1e-3),
                         lambda: kernels.schur_system(R, t, m, base, phi, phi_hat, params, 1e-3)),
        "robust_cost": (lambda: kernels.robust_cost_py(R, t, m, base, phi, phi_hat, params),
                        lambda: kernels.robust_cost(R, t, m, base, phi, phi_hat, params)),
        "zbuffer": (lambda: kernels.zbuffer_py(u, v, depth, 1242, 375),
                    lambda: kernels.zbuffer(u, v, depth, 1242, 375)),
    }
    print(f"{'kernel':<14}{'numpy ms':>10}{'cython ms':>11}{'speed-up':>10}  agree")
    for name, (py, cy) in jobs.items():
        a, b = py(), cy()
        a, b = (a, b) if isinstance(a, tuple) else ((a,), (b,))
        agree = all(np.allclose(x, y, rtol=1e-9, atol=1e-9) for x, y in zip(a, b))
        tp, tc = _time(py, args.repeat), _time(cy, args.repeat)
        print(f"{name:<14}{tp * 1e3:>10.3f}{tc * 1e3:>11.3f}{tp / tc:>9.1f}x  {agree}")


if __name__ == "__main__":
    main()
