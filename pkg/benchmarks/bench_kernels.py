#!/usr/bin/env python3
"""Benchmark the jitted hot kernels against their pure-numpy fallbacks.

Both implementations are imported directly, so this works regardless of the
FKMD_DISABLE_NUMBA setting. Each kernel is warmed up once (JIT compilation),
timed over repeated calls, and checked for agreement.

Usage: python benchmarks/bench_kernels.py [--rows 4096] [--features 2000]
       [--dim 40] [--repeats 5]
"""

import argparse
import time

import numpy as np

from fkmd import _accel


def _time(fn, args, repeats):
    fn(*args)  # warmup / JIT
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _row(name, fn_np, fn_nb, args, repeats, agreement):
    t_np = _time(fn_np, args, repeats)
    if fn_nb is None:
        print(f"{name:<22} numpy {t_np * 1e3:9.2f} ms   numba       n/a")
        return
    t_nb = _time(fn_nb, args, repeats)
    print(
        f"{name:<22} numpy {t_np * 1e3:9.2f} ms   numba {t_nb * 1e3:9.2f} ms   "
        f"speedup {t_np / t_nb:6.2f}x   agreement {agreement:.2e}"
    )


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=4096)
    parser.add_argument("--features", type=int, default=2000)
    parser.add_argument("--dim", type=int, default=40)
    parser.add_argument("--subsample", type=int, default=1500)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if not _accel.HAVE_NUMBA:
        print("numba unavailable; only the numpy path can be timed")

    rng = np.random.default_rng(0)
    zp = rng.standard_normal((args.rows, args.dim))
    zc = rng.standard_normal((args.features, args.dim))
    om = rng.standard_normal((args.features, args.dim))
    zs = rng.standard_normal((args.subsample, args.dim))
    theta0 = rng.standard_normal(40) + 8.0

    print(
        f"rows={args.rows} features={args.features} dim={args.dim} "
        f"subsample={args.subsample} (best of {args.repeats})"
    )

    if _accel.HAVE_NUMBA:
        agree = np.abs(
            _accel.kernel_block_nb(zp, zc) - _accel.kernel_block_np(zp, zc)
        ).max()
        _row("gaussian feature tile", _accel.kernel_block_np,
             _accel.kernel_block_nb, (zp, zc), args.repeats, agree)

        agree = np.abs(
            _accel.rff_block_nb(zp, om) - _accel.rff_block_np(zp, om)
        ).max()
        _row("fourier feature tile", _accel.rff_block_np,
             _accel.rff_block_nb, (zp, om), args.repeats, agree)

        s_np = _accel.pairwise_stats_np(zs)
        s_nb = _accel.pairwise_stats_nb(zs)
        agree = max(
            abs(s_np[0] - s_nb[0]) / abs(s_np[0]),
            abs(s_np[1] - s_nb[1]) / abs(s_np[1]),
        )
        _row("pairwise distances", _accel.pairwise_stats_np,
             _accel.pairwise_stats_nb, (zs,), args.repeats, agree)

        t_np, _ = _accel.lorenz96_trajectory_np(theta0, 8.0, 1e-2, 5, 2000)
        t_nb, _ = _accel.lorenz96_trajectory_nb(theta0, 8.0, 1e-2, 5, 2000)
        agree = np.abs(t_np - t_nb).max()
        _row("lorenz-96 rk4 (2000)", _accel.lorenz96_trajectory_np,
             _accel.lorenz96_trajectory_nb, (theta0, 8.0, 1e-2, 5, 2000),
             args.repeats, agree)
    else:
        _row("gaussian feature tile", _accel.kernel_block_np, None,
             (zp, zc), args.repeats, 0.0)
        _row("fourier feature tile", _accel.rff_block_np, None,
             (zp, om), args.repeats, 0.0)
        _row("pairwise distances", _accel.pairwise_stats_np, None,
             (zs,), args.repeats, 0.0)
        _row("lorenz-96 rk4 (2000)", _accel.lorenz96_trajectory_np, None,
             (theta0, 8.0, 1e-2, 5, 2000), args.repeats, 0.0)


if __name__ == "__main__":
    main()
