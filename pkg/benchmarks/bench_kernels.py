"""Benchmark the numba kernels against the pure-numpy fallback.

Run from the repository root:

    python3 benchmarks/bench_kernels.py [--repeats N]

Times the depthwise convolution (forward and both gradients) and the
point-in-polygon test at a few realistic sizes, then prints the median
per-call time of each backend and the speedup. Numba functions are called
once per shape before timing so JIT compilation is excluded.
"""

import argparse
import statistics
import time

import numpy as np

from slidemil.kernels import _numba, _numpy


def _time(fn, repeats):
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def _fmt(seconds):
    if seconds < 1e-3:
        return f"{seconds * 1e6:8.1f} µs"
    return f"{seconds * 1e3:8.2f} ms"


def _row(name, numpy_fn, numba_fn, repeats):
    t_np = _time(numpy_fn, repeats)
    if numba_fn is None:
        print(f"{name:<42} {_fmt(t_np)}   (numba unavailable)")
        return
    numba_fn()  # warm the JIT cache
    t_nb = _time(numba_fn, repeats)
    print(f"{name:<42} {_fmt(t_np)} {_fmt(t_nb)} {t_np / t_nb:8.1f}x")


def bench_conv(repeats):
    rng = np.random.default_rng(0)
    for side, channels, k in ((16, 128, 3), (32, 256, 5), (48, 512, 7)):
        x = rng.standard_normal((side, side, channels))
        kern = rng.standard_normal((k, k, channels))
        grad = rng.standard_normal(x.shape)
        name = f"conv {side}x{side}x{channels} k={k}"
        _row(f"{name} forward",
             lambda: _numpy.depthwise_conv2d(x, kern),
             (lambda: _numba.depthwise_conv2d(x, kern)) if _numba else None,
             repeats)
        _row(f"{name} grad-input",
             lambda: _numpy.depthwise_conv2d_grad_input(grad, kern),
             (lambda: _numba.depthwise_conv2d_grad_input(grad, kern))
             if _numba else None,
             repeats)
        _row(f"{name} grad-kernel",
             lambda: _numpy.depthwise_conv2d_grad_kernel(grad, x, k),
             (lambda: _numba.depthwise_conv2d_grad_kernel(grad, x, k))
             if _numba else None,
             repeats)


def bench_polygon(repeats):
    rng = np.random.default_rng(1)
    for n_points, n_vertices in ((10_000, 64), (100_000, 256)):
        angles = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
        radii = rng.uniform(0.5, 1.0, n_vertices)
        polygon = np.column_stack([radii * np.cos(angles),
                                   radii * np.sin(angles)])
        points = rng.uniform(-1, 1, (n_points, 2))
        name = f"polygon {n_points} pts, {n_vertices} vertices"
        _row(name,
             lambda: _numpy.points_in_polygon(points, polygon),
             (lambda: _numba.points_in_polygon(points, polygon))
             if _numba else None,
             repeats)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=7,
                        help="timing repetitions per case (median reported)")
    args = parser.parse_args()
    header = f"{'case':<42} {'numpy':>11} {'numba':>11} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    bench_conv(args.repeats)
    bench_polygon(args.repeats)


if __name__ == "__main__":
    main()
