"""Time the numba and numpy kernel backends on the training workload shapes.

Usage: python benchmarks/bench_kernels.py [--batch 64] [--repeats 15]
"""

import argparse
import time

import numpy as np

from tipspool.kernels import numpy_impl

try:
    from tipspool.kernels import numba_impl
except ImportError:
    numba_impl = None

# (c, o, spatial) pairs mirroring the default backbone plus the TIPS branches
CONV_SHAPES = [
    (1, 6, 32),
    (6, 6, 32),
    (6, 12, 16),
    (12, 12, 16),
    (12, 24, 8),
]


def best_of(fn, repeats):
    fn()  # warm up (and JIT-compile on the numba side)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_conv(impl, batch, repeats):
    rows = []
    rng = np.random.default_rng(0)
    for c, o, hw in CONV_SHAPES:
        xp = rng.standard_normal((batch, c, hw + 2, hw + 2)).astype(np.float32)
        w = rng.standard_normal((o, c, 3, 3)).astype(np.float32)
        b = np.zeros(o, np.float32)
        gy = rng.standard_normal((batch, o, hw, hw)).astype(np.float32)
        fwd = best_of(lambda: impl.conv2d_forward(xp, w, b, 1), repeats)
        gin = best_of(lambda: impl.conv2d_grad_input(gy, w, 1, hw + 2, hw + 2), repeats)
        gw = best_of(lambda: impl.conv2d_grad_weight(gy, xp, 3, 1), repeats)
        rows.append((f"conv {c:>2}->{o:<2} @{hw}", fwd, gin, gw))
    return rows


def bench_maxpool(impl, batch, repeats):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((batch, 12, 16, 16)).astype(np.float32)
    fwd = best_of(lambda: impl.maxpool_forward(x, 2), repeats)
    out, idx = impl.maxpool_forward(x, 2)
    gy = rng.standard_normal(out.shape).astype(np.float32)
    bwd = best_of(lambda: impl.maxpool_backward(gy, idx, 2), repeats)
    return [("maxpool 12ch @16", fwd, bwd, float("nan"))]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=15)
    args = ap.parse_args()

    impls = [("numpy", numpy_impl)]
    if numba_impl is not None:
        impls.append(("numba", numba_impl))
    else:
        print("numba unavailable; timing the numpy backend only")

    results = {}
    for name, impl in impls:
        results[name] = bench_conv(impl, args.batch, args.repeats) + bench_maxpool(
            impl, args.batch, args.repeats
        )

    header = f"{'kernel':<18}"
    for name, _ in impls:
        header += f"  {name + ' fwd':>11} {name + ' gin':>11} {name + ' gw':>11}"
    print(header)
    for i, (label, *_) in enumerate(results[impls[0][0]]):
        line = f"{label:<18}"
        for name, _ in impls:
            _, fwd, gin, gw = results[name][i]
            line += f"  {fwd * 1e3:9.2f}ms {gin * 1e3:9.2f}ms"
            line += f" {gw * 1e3:9.2f}ms" if np.isfinite(gw) else f" {'-':>11}"
        print(line)

    if len(impls) == 2:
        tot = {name: sum(f + g + (w if np.isfinite(w) else 0) for _, f, g, w in rows)
               for name, rows in results.items()}
        ratio = tot["numba"] / tot["numpy"]
        print(f"\ntotal: numpy {tot['numpy'] * 1e3:.1f}ms, numba {tot['numba'] * 1e3:.1f}ms "
              f"(numba/numpy = {ratio:.2f}x)")


if __name__ == "__main__":
    main()
