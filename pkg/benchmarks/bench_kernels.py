#!/usr/bin/env python3
"""Benchmark the JIT kernel lane against the plain-Python fallback.

The package picks its lane at import time (RADPIPE_DISABLE_NUMBA=1 forces
the fallback); this script times both implementations directly in one
process and checks they agree.
"""

import time

import numpy as np

from radpipe import kernels


def timeit(fn, *args, repeat=5, warmup=1):
    for _ in range(warmup):
        fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def row(name, size, plain, jit):
    if jit is None:
        print(f"{name:<14} {size:<12} {plain * 1e3:>12.2f} {'-':>12} {'-':>9}")
    else:
        print(f"{name:<14} {size:<12} {plain * 1e3:>12.2f} {jit * 1e3:>12.2f} {plain / jit:>8.1f}x")


def main():
    rng = np.random.default_rng(0)
    sizes = [(60, 60), (200, 220), (500, 520)]
    print(f"numba lane available: {kernels.NUMBA_ENABLED}")
    print(f"{'kernel':<14} {'size':<12} {'plain (ms)':>12} {'jit (ms)':>12} {'speedup':>9}")
    for name, plain_fn, jit_fn in (
        ("lcs_len", kernels._lcs_len_impl, getattr(kernels, "_lcs_len_jit", None)),
        ("greedy_align", kernels._greedy_align_impl, getattr(kernels, "_greedy_align_jit", None)),
    ):
        for n, m in sizes:
            a = rng.integers(0, 50, size=n).astype(np.int64)
            b = rng.integers(0, 50, size=m).astype(np.int64)
            plain = timeit(plain_fn, a, b)
            jit = None
            if kernels.NUMBA_ENABLED and jit_fn is not None:
                jit = timeit(jit_fn, a, b)
                assert np.all(np.asarray(plain_fn(a, b)) == np.asarray(jit_fn(a, b)))
            row(name, f"{n}x{m}", plain, jit)


if __name__ == "__main__":
    main()
