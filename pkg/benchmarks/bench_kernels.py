"""Compare the compiled and numpy im2col/col2im kernels.

Usage: python benchmarks/bench_kernels.py [--repeats N]

Each case is a convolution layer of the default network at a given input
resolution, batch 32. Prints the median time per call for both backends and
the speed-up of the compiled one.
"""
import argparse
import statistics
import time

import numpy as np

from resdistill import _pykernels

try:
    from resdistill import _ckernels
except ImportError:
    _ckernels = None

# (channels, spatial size) of the conv inputs in the default network at 64px
CASES = [("block0 @64", 1, 64), ("block1 @64", 16, 32), ("block2 @64", 32, 16),
         ("block0 @32", 1, 32), ("block1 @32", 16, 16), ("block3 @64", 64, 8)]


def _median_ms(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=15)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args()
    if _ckernels is None:
        raise SystemExit("compiled kernels not built; run pip install -e . --no-build-isolation")
    rng = np.random.default_rng(0)
    print(f"{'case':12s} {'op':7s} {'numpy ms':>9s} {'cython ms':>10s} {'speed-up':>9s}")
    for name, c, r in CASES:
        x = rng.standard_normal((args.batch, c, r, r))
        cols = _pykernels.im2col(x, 3, 3, 2, 1)
        g = rng.standard_normal(cols.shape)
        for op, py, cy in [
            ("im2col", lambda: _pykernels.im2col(x, 3, 3, 2, 1), lambda: _ckernels.im2col(x, 3, 3, 2, 1)),
            ("col2im", lambda: _pykernels.col2im(g, x.shape, 3, 3, 2, 1),
             lambda: _ckernels.col2im(g, x.shape, 3, 3, 2, 1)),
        ]:
            a, b = _median_ms(py, args.repeats), _median_ms(cy, args.repeats)
            print(f"{name:12s} {op:7s} {a:9.3f} {b:10.3f} {a / b:8.2f}x")


if __name__ == "__main__":
    main()
