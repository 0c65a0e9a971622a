"""Benchmark the compiled convolution kernels against the pure-numpy fallback.

Usage:
    python3 benchmarks/bench_kernels.py [--repeats N]

Prints a table of median wall times per call and the speedup of the compiled
backend, for the convolution shapes that dominate the toy network's runtime.
"""

import argparse
import statistics
import time

import numpy as np

from lightnl.kernels import _pure

try:
    from lightnl.kernels import _fastconv
except ImportError:
    _fastconv = None

CASES = [
    # (label, kind, n, h, w, ci, co, stride)
    ("stem 3x3 s2", "conv", 64, 28, 28, 1, 8, 2),
    ("expand 1x1", "conv1x1", 64, 14, 14, 16, 64, 1),
    ("project 1x1", "conv1x1", 64, 7, 7, 96, 32, 1),
    ("dwconv 3x3", "dw", 64, 14, 14, 64, 0, 1),
    ("dwconv 3x3 big", "dw", 8, 56, 56, 32, 0, 1),
]


def _timeit(fn, repeats):
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return statistics.median(samples)


def _build(kind, backend, rng, n, h, w, ci, co, stride):
    x = rng.standard_normal((n, h, w, ci))
    if kind == "dw":
        wt = rng.standard_normal((3, 3, ci))
        return lambda: backend.dwconv3x3_forward(x, wt)
    k = 1 if kind == "conv1x1" else 3
    pad = 0 if kind == "conv1x1" else 1
    wt = rng.standard_normal((k, k, ci, co))
    return lambda: backend.conv2d_forward(x, wt, stride, pad)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=7)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    if _fastconv is None:
        print("compiled backend unavailable; timing pure backend only")
    header = f"{'case':<18}{'pure (ms)':>12}{'cython (ms)':>14}{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for label, kind, n, h, w, ci, co, stride in CASES:
        t_pure = _timeit(_build(kind, _pure, rng, n, h, w, ci, co, stride),
                         args.repeats) * 1e3
        if _fastconv is None:
            print(f"{label:<18}{t_pure:>12.2f}{'-':>14}{'-':>10}")
            continue
        t_fast = _timeit(_build(kind, _fastconv, rng, n, h, w, ci, co, stride),
                         args.repeats) * 1e3
        print(f"{label:<18}{t_pure:>12.2f}{t_fast:>14.2f}"
              f"{t_pure / t_fast:>9.2f}x")


if __name__ == "__main__":
    main()
