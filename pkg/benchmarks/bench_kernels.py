"""Time the compiled grid kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--points N]
Runs one Lax-Friedrichs sweep on the default grid and one batch of trilinear
queries per repetition and reports the best wall time per backend.
"""

import argparse
import timeit

import numpy as np

from hjshield import _kernels_py, kernels
from hjshield.reachability import GameParams, Grid3D, cfl_timestep, dissipation_coefficients, signed_distance_target


def bench(mod, V, grid, params, pts, repeat):
    out = np.empty_like(V)
    at = dissipation_coefficients(grid, params)[2]
    dt = cfl_timestep(grid, params, 0.5)
    args = (grid.xs, grid.ys, np.cos(grid.thetas), np.sin(grid.thetas), grid.dx, grid.dy, grid.dtheta,
            params.v, params.omega_max, at, dt)
    vals, clamped = np.empty(len(pts)), np.zeros(len(pts), np.uint8)
    sweep = min(timeit.repeat(lambda: mod.lf_sweep(V, out, *args), number=1, repeat=repeat))
    interp = min(timeit.repeat(
        lambda: mod.trilinear(V, grid.x_lo, grid.y_lo, grid.dx, grid.dy, grid.dtheta, pts, vals, clamped),
        number=1, repeat=repeat))
    return sweep, interp


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--points", type=int, default=100_000)
    args = ap.parse_args(argv)
    grid, params = Grid3D(), GameParams()
    V = np.ascontiguousarray(signed_distance_target(grid, params.d).values)
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(grid.x_lo, grid.x_hi, args.points),
                           rng.uniform(grid.y_lo, grid.y_hi, args.points),
                           rng.uniform(-np.pi, np.pi, args.points)])
    rows = [("python", *bench(_kernels_py, V, grid, params, pts, args.repeat))]
    if kernels.BACKEND == "cython":
        rows.append(("cython", *bench(kernels, V, grid, params, pts, args.repeat)))
    else:
        print("compiled kernels not built; timing the numpy fallback only")
    print(f"grid {grid.nx}x{grid.ny}x{grid.ntheta}, {args.points} interpolation points")
    print(f"{'backend':8s} {'sweep [ms]':>12s} {'interp [ms]':>12s}")
    for name, s, i in rows:
        print(f"{name:8s} {1e3 * s:12.2f} {1e3 * i:12.2f}")
    if len(rows) == 2:
        print(f"speedup  {rows[0][1] / rows[1][1]:12.1f}x {rows[0][2] / rows[1][2]:11.1f}x")


if __name__ == "__main__":
    main()
