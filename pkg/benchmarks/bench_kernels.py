"""Time the numba kernels against their numpy twins on simulator-sized inputs.

    python benchmarks/bench_kernels.py [--repeat N]

Without numba (or with EHWSN_DISABLE_NUMBA=1) the "numba" column runs the
same loops as plain Python, which is what the fallback would cost.
"""

import argparse
import time

import numpy as np

from ehwsn import kernels
from ehwsn._accel import NUMBA_ENABLED


def best_of(fn, repeat):
    fn()  # warm-up / compile
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    pts = np.column_stack([np.arange(60) / 59, rng.random(60)])
    inc = rng.normal(0.02, 0.05, 600)
    wq = rng.integers(-2**15 + 1, 2**15, (64, 60))
    xq = rng.integers(-2**15 + 1, 2**15, (256, 60))
    bq = rng.integers(-1000, 1000, 64)
    return {
        "lloyd k=12, 60 points": (
            lambda: kernels._lloyd_nb(pts, 12, 4, 0),
            lambda: kernels._lloyd_np(pts, 12, 4, 0),
        ),
        "clamped_accumulate, 600 steps": (
            lambda: kernels._clamped_accumulate_nb(5.0, inc, 200.0),
            lambda: kernels._clamped_accumulate_np(5.0, inc, 200.0),
        ),
        "fixed_dense 256x60 -> 64": (
            lambda: kernels._fixed_dense_nb(wq, xq, bq, 15),
            lambda: kernels._fixed_dense_np(wq, xq, bq, 15),
        ),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print(f"numba enabled: {NUMBA_ENABLED}")
    print(f"{'kernel':<32} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name, (nb, npy) in cases(np.random.default_rng(args.seed)).items():
        t_nb = best_of(nb, args.repeat)
        t_np = best_of(npy, args.repeat)
        print(f"{name:<32} {t_nb * 1e3:10.3f} {t_np * 1e3:10.3f} {t_np / t_nb:8.1f}")


if __name__ == "__main__":
    main()
