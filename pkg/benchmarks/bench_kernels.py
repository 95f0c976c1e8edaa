"""Benchmark the compiled convolution backend against the numpy fallback.

Times conv2d_forward and conv2d_backward on a few representative shapes and
prints the per-call medians plus the speedup. Both backends are imported
directly so the comparison does not depend on RANKNCE_KERNELS.

Run:
    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --repeats 50 --channels 8 --size 64
"""

import argparse
import statistics
import time

import numpy as np

from ranknce.kernels import _conv_np

try:
    from ranknce.kernels import _conv_cy
except ImportError:
    _conv_cy = None


def time_call(fn, args, repeats):
    """Median seconds per call after one warmup."""
    fn(*args)
    samples = []
    for _ in range(repeats):
        started = time.perf_counter()
        fn(*args)
        samples.append(time.perf_counter() - started)
    return statistics.median(samples)


def bench_shape(cin, cout, size, repeats, rng):
    x = rng.normal(size=(cin, size, size))
    kernel = rng.normal(size=(cout, cin, 3, 3))
    bias = rng.normal(size=cout)
    grad_out = rng.normal(size=(cout, size, size))

    rows = []
    fwd_np = time_call(_conv_np.conv2d_forward, (x, kernel, bias), repeats)
    bwd_np = time_call(_conv_np.conv2d_backward, (x, kernel, grad_out), repeats)
    rows.append(("numpy", fwd_np, bwd_np))
    if _conv_cy is not None:
        fwd_cy = time_call(_conv_cy.conv2d_forward, (x, kernel, bias), repeats)
        bwd_cy = time_call(_conv_cy.conv2d_backward, (x, kernel, grad_out), repeats)
        rows.append(("compiled", fwd_cy, bwd_cy))

        out_np = _conv_np.conv2d_forward(x, kernel, bias)
        out_cy = _conv_cy.conv2d_forward(x, kernel, bias)
        worst = float(np.max(np.abs(out_np - out_cy)))
        assert worst <= 1e-12, f"backend disagreement {worst:.2e}"
    return rows


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20, help="timed calls per case")
    parser.add_argument("--channels", type=int, default=None, help="run only this channel count")
    parser.add_argument("--size", type=int, default=None, help="run only this spatial size")
    args = parser.parse_args(argv)

    cases = [(1, 4, 16), (4, 8, 16), (8, 8, 32), (8, 16, 64)]
    if args.channels is not None or args.size is not None:
        cin = args.channels or 4
        cases = [(cin, max(cin, 4), args.size or 32)]

    rng = np.random.Generator(np.random.PCG64(0))
    if _conv_cy is None:
        print("compiled extension not built; timing numpy only")
    header = f"{'shape':>22}  {'backend':>8}  {'forward':>10}  {'backward':>10}"
    print(header)
    print("-" * len(header))
    for cin, cout, size in cases:
        rows = bench_shape(cin, cout, size, args.repeats, rng)
        label = f"{cin}x{size}x{size} -> {cout}"
        for backend, fwd, bwd in rows:
            print(
                f"{label:>22}  {backend:>8}  {fwd * 1e3:>8.3f}ms  {bwd * 1e3:>8.3f}ms"
            )
            label = ""
        if len(rows) == 2:
            fwd_ratio = rows[0][1] / rows[1][1]
            bwd_ratio = rows[0][2] / rows[1][2]
            print(f"{'':>22}  {'speedup':>8}  {fwd_ratio:>9.1f}x  {bwd_ratio:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
