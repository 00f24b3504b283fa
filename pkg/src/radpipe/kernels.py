"""Loop-bound kernels with optional numba JIT.

The heavy numeric path of this package (transformer forwards/backwards) is
matmul-bound and already runs on BLAS, so JIT is applied only where plain
Python loops would dominate: LCS table fill for ROUGE-L and the greedy
unigram alignment for METEOR.

Lane selection: numba is used when importable unless RADPIPE_DISABLE_NUMBA=1,
in which case the same function bodies run uncompiled. Both lanes are
bit-identical; benchmarks/bench_kernels.py compares their speed.
"""

from __future__ import annotations

import os

import numpy as np


def _lcs_len_impl(a, b):
    """Length of the longest common subsequence of two int sequences."""
    n, m = a.shape[0], b.shape[0]
    prev = np.zeros(m + 1, dtype=np.int64)
    curr = np.zeros(m + 1, dtype=np.int64)
    for i in range(n):
        for j in range(m):
            if a[i] == b[j]:
                curr[j + 1] = prev[j] + 1
            elif prev[j + 1] >= curr[j]:
                curr[j + 1] = prev[j + 1]
            else:
                curr[j + 1] = curr[j]
        prev, curr = curr, prev
    return prev[m]


def _greedy_align_impl(pred, ref):
    """Leftmost-greedy exact unigram alignment, each token matched once.

    Returns (matches, chunks): chunks are maximal runs adjacent in both
    the prediction and the reference.
    """
    n, m = pred.shape[0], ref.shape[0]
    used = np.zeros(m, dtype=np.bool_)
    match_pos = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        for j in range(m):
            if not used[j] and ref[j] == pred[i]:
                used[j] = True
                match_pos[i] = j
                break
    matches = 0
    chunks = 0
    prev_i = -2
    prev_j = -2
    for i in range(n):
        j = match_pos[i]
        if j < 0:
            continue
        matches += 1
        if i != prev_i + 1 or j != prev_j + 1:
            chunks += 1
        prev_i = i
        prev_j = j
    return matches, chunks


NUMBA_ENABLED = False
if os.environ.get("RADPIPE_DISABLE_NUMBA", "0") != "1":
    try:
        from numba import njit

        _lcs_len_jit = njit(cache=True)(_lcs_len_impl)
        _greedy_align_jit = njit(cache=True)(_greedy_align_impl)
        NUMBA_ENABLED = True
    except ImportError:
        pass


def lcs_len(a: np.ndarray, b: np.ndarray) -> int:
    a = np.ascontiguousarray(a, dtype=np.int64)
    b = np.ascontiguousarray(b, dtype=np.int64)
    if a.size == 0 or b.size == 0:
        return 0
    fn = _lcs_len_jit if NUMBA_ENABLED else _lcs_len_impl
    return int(fn(a, b))


def greedy_align(pred: np.ndarray, ref: np.ndarray):
    pred = np.ascontiguousarray(pred, dtype=np.int64)
    ref = np.ascontiguousarray(ref, dtype=np.int64)
    if pred.size == 0 or ref.size == 0:
        return 0, 0
    fn = _greedy_align_jit if NUMBA_ENABLED else _greedy_align_impl
    m, c = fn(pred, ref)
    return int(m), int(c)
