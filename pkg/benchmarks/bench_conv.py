"""Time the circular conv2d kernels of each available backend.

    python3 benchmarks/bench_conv.py [--repeat N]

Prints the median time per call for the forward pass and both gradients at
the sizes the network uses, and checks the backends agree.
"""
import argparse
import statistics
import time

import numpy as np

from mnmmol import kernels

CASES = [
    ("2->16, 16x16", (2, 16, 16), (16, 2, 3, 3)),
    ("16->16, 32x32", (16, 32, 32), (16, 16, 3, 3)),
    ("16->2, 32x32", (16, 32, 32), (2, 16, 3, 3)),
    ("16->16, 64x64", (16, 64, 64), (16, 16, 3, 3)),
]


def median_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    names = kernels.available_backends()
    rng = np.random.default_rng(0)
    print(f"backends: {', '.join(names)}")
    print(f"{'case':<16} {'op':<12}" + "".join(f"{n:>12}" for n in names) + ("   speedup" if len(names) > 1 else ""))
    for label, xs, ws in CASES:
        x, w, bias = rng.standard_normal(xs), rng.standard_normal(ws), rng.standard_normal(ws[0])
        gy = rng.standard_normal((ws[0],) + xs[1:])
        ops = {
            "forward": lambda m: m.conv2d_forward(x, w, bias),
            "grad_input": lambda m: m.conv2d_grad_input(gy, w),
            "grad_weight": lambda m: m.conv2d_grad_weight(gy, x, ws[-1]),
        }
        for op, call in ops.items():
            mods = [kernels.get_backend(n) for n in names]
            outs = [call(m) for m in mods]
            for o in outs[1:]:
                np.testing.assert_allclose(o, outs[0], rtol=1e-12, atol=1e-10)
            ts = [median_time(lambda m=m: call(m), args.repeat) for m in mods]
            row = f"{label:<16} {op:<12}" + "".join(f"{1e3 * t:>10.3f}ms" for t in ts)
            if len(ts) > 1:
                row += f"   {ts[names.index('python')] / ts[names.index('cython')]:6.2f}x"
            print(row)


if __name__ == "__main__":
    main()
