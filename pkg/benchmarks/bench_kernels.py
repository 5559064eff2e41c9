"""Compare the numba and pure-numpy gather/scatter kernels.

    python benchmarks/bench_kernels.py [--repeat N]

Prints the median wall time per call for each backend on the shapes the
control module uses, plus a bit-equality check of the two outputs.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from sitsforecast.core import kernels

SHAPES = [
    ("level0 history", (8, 16, 3, 16, 16)),
    ("level1 history", (8, 32, 3, 8, 8)),
    ("gradcheck size", (2, 3, 3, 4, 4)),
]


def _median_time(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if kernels.im2col_numba is None:
        print("numba is not available; only the numpy backend can be timed")
    rng = np.random.default_rng(0)
    print(f"{'shape':<16} {'op':<7} {'numpy ms':>9} {'numba ms':>9} {'speedup':>8}  equal")
    for label, shape in SHAPES:
        x = rng.normal(size=shape)
        B, C, T, H, W = shape
        dcols = rng.normal(size=(B, C, 3, 3, 3, T, H, W))
        pairs = [
            ("im2col", lambda: kernels.im2col_numpy(x, 3, 3, 3),
             kernels.im2col_numba and (lambda: kernels.im2col_numba(x, 3, 3, 3))),
            ("col2im", lambda: kernels.col2im_numpy(dcols, T, H, W),
             kernels.col2im_numba and (lambda: kernels.col2im_numba(dcols, T, H, W))),
        ]
        for op, f_np, f_nb in pairs:
            t_np = _median_time(f_np, args.repeat)
            if f_nb is None:
                print(f"{label:<16} {op:<7} {1e3 * t_np:>9.3f} {'-':>9} {'-':>8}  -")
                continue
            f_nb()  # compile outside the timed region
            t_nb = _median_time(f_nb, args.repeat)
            equal = np.array_equal(f_np(), f_nb())
            print(f"{label:<16} {op:<7} {1e3 * t_np:>9.3f} {1e3 * t_nb:>9.3f} {t_np / t_nb:>7.2f}x  {equal}")
    print(f"active backend: {kernels.BACKEND}")


if __name__ == "__main__":
    main()
