#!/usr/bin/env python3
"""Benchmark the numba hot kernels against the pure-numpy fallback.

Builds both backends in-process (no env juggling needed) and times the fold
maps plus the counted matmul on training-realistic sizes.

Run: python benchmarks/bench_kernels.py
"""

import os
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from kronblock._kernels import HAVE_NUMBA, build_backend  # noqa: E402

REPEATS = int(os.environ.get("BENCH_REPEATS", "200"))


def timeit(fn, *args, repeats=REPEATS):
    fn(*args)  # warm-up (triggers jit compile on the numba backend)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def main():
    backends = [build_backend(False)]
    if HAVE_NUMBA:
        backends.append(build_backend(True))
    else:
        print("numba not available; timing the numpy backend only")

    rng = np.random.default_rng(0)
    cases = [
        ("fold_input 64x784 (n1=392,n2=2)", "fold_input", (rng.standard_normal((64, 784)), 392, 2)),
        ("fold_input 64x784 (n1=49,n2=16)", "fold_input", (rng.standard_normal((64, 784)), 49, 16)),
        ("fold_mid 2x(64*392)", "fold_mid", (rng.standard_normal((2, 64 * 392)), 392)),
        ("fold_output (64*2)x5", "fold_output", (rng.standard_normal((64 * 2, 5)), 2)),
        ("counted_matmul 32x32 @ 32x32", "counted_matmul",
         (rng.standard_normal((32, 32)), rng.standard_normal((32, 32)))),
        ("counted_matmul 16x784 @ 784x10", "counted_matmul",
         (rng.standard_normal((16, 784)), rng.standard_normal((784, 10)))),
    ]

    width = max(len(name) for name, _, _ in cases)
    header = f"{'kernel':<{width}} " + " ".join(f"{b.name:>12}" for b in backends)
    print(header)
    print("-" * len(header))
    for name, attr, args in cases:
        times = [timeit(getattr(b, attr), *args) for b in backends]
        cells = " ".join(f"{t * 1e6:>10.1f}us" for t in times)
        line = f"{name:<{width}} {cells}"
        if len(times) == 2 and times[1] > 0:
            line += f"   numba speedup: {times[0] / times[1]:.1f}x"
        print(line)

    # sanity: backends agree bit-exactly
    x = rng.standard_normal((8, 24))
    for b in backends:
        ref = backends[0].fold_input(x, 6, 4)
        assert np.array_equal(ref, b.fold_input(x, 6, 4))
    print("\nbackends agree bit-exactly on fold_input")


if __name__ == "__main__":
    main()
