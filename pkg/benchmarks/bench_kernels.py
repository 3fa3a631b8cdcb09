"""Numba vs numpy kernel timings on attention-sized inputs.

    python3 benchmarks/bench_kernels.py [--t 576] [--repeats 20]

Prints one line per kernel with the median time of each backend, their ratio,
and the max absolute difference between the two outputs.
"""
import argparse
import statistics
import time

import numpy as np

from unienc._kernels import numba_impl, numpy_impl


def median_time(fn, repeats):
    fn()  # compile / warm caches
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def cases(t, d, rng):
    scores = rng.normal(size=(4 * t, t))
    mask = rng.random((4 * t, t)) < 0.5
    mask[:, 0] = True
    probs = numpy_impl.masked_softmax_fwd(scores, mask)
    grad = rng.normal(size=scores.shape)
    x = rng.normal(size=(8 * t, d))
    gamma, beta = rng.normal(size=d), rng.normal(size=d)
    _, xhat, rstd = numpy_impl.layernorm_fwd(x, gamma, beta, 1e-12)
    dy = rng.normal(size=x.shape)
    h = rng.normal(size=(8 * t, 4 * d))
    idx = rng.integers(0, 256, size=8 * t)
    owner = np.repeat(np.arange(-1, 10), t // 11 + 1)[:t].astype(np.int64)
    return {
        "masked_softmax_fwd": lambda impl: impl.masked_softmax_fwd(scores, mask),
        "masked_softmax_bwd": lambda impl: impl.masked_softmax_bwd(probs, grad),
        "layernorm_fwd": lambda impl: impl.layernorm_fwd(x, gamma, beta, 1e-12)[0],
        "layernorm_bwd": lambda impl: impl.layernorm_bwd(dy, xhat, rstd, gamma)[0],
        "gelu_fwd": lambda impl: impl.gelu_fwd(h),
        "gelu_bwd": lambda impl: impl.gelu_bwd(h, h),
        "scatter_add_rows": lambda impl: impl.scatter_add_rows(np.zeros((256, d)), idx, x),
        "region_mask": lambda impl: impl.region_mask(owner, 1, True),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--t", type=int, default=576, help="sequence length")
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for name, run in cases(args.t, args.d, rng).items():
        a = np.asarray(run(numpy_impl), dtype=np.float64)
        b = np.asarray(run(numba_impl), dtype=np.float64)
        diff = float(np.max(np.abs(a - b))) if a.size else 0.0
        tn = median_time(lambda: run(numpy_impl), args.repeats)
        tb = median_time(lambda: run(numba_impl), args.repeats)
        print(f"{name:<20} {tn * 1e3:10.3f} {tb * 1e3:10.3f} {tn / tb:8.2f} {diff:11.3g}")


if __name__ == "__main__":
    main()
