"""Throughput comparison of the fused-convolution backends.

The per-pixel fused convolution is the one kernel that cannot be phrased
as a static matmul, so it gets a compiled implementation with a numpy
fallback.  This script times forward and backward for both backends over
a few representative shapes.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from kbnet import backend

SHAPES = [
    # (batch, channels, n_bases, kernel, height, width)
    (1, 16, 8, 3, 64, 64),
    (8, 16, 8, 3, 64, 64),
    (1, 64, 32, 3, 32, 32),
    (1, 128, 32, 3, 16, 16),
]


def _time(fn, repeats):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    names = backend.available()
    print(f"backends: {', '.join(names)} (active: {backend.ACTIVE})")
    header = f"{'shape':<28}{'pass':<10}" + "".join(f"{n:>12}" for n in names)
    if len(names) > 1:
        header += f"{'speedup':>10}"
    print(header)

    rng = np.random.default_rng(0)
    for b, c, n, k, h, w in SHAPES:
        xe = rng.standard_normal((b, c, h, w)).astype(np.float32)
        bases = rng.standard_normal((n, c, 4, k, k)).astype(np.float32)
        coeffs = rng.standard_normal((b, n, h, w)).astype(np.float32)
        grad = rng.standard_normal(xe.shape).astype(np.float32)
        label = f"b{b} c{c} n{n} k{k} {h}x{w}"
        for direction in ("forward", "backward"):
            times = []
            for name in names:
                impl = backend.get_impl(name)
                if direction == "forward":
                    fn = lambda: impl.fused_conv_forward(xe, bases, coeffs)
                else:
                    fn = lambda: impl.fused_conv_backward(xe, bases, coeffs, grad)
                times.append(_time(fn, args.repeats))
            row = f"{label:<28}{direction:<10}"
            row += "".join(f"{t * 1e3:>10.2f}ms" for t in times)
            if len(times) > 1:
                row += f"{times[0] / times[-1]:>9.1f}x"
            print(row)


if __name__ == "__main__":
    main()
