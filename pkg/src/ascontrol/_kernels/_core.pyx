# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled exhaustive path-reduction kernel.

Depth-first walk over every nonzero-probability state path, accumulating
exp(path log-weight - shift) against a per-path upper bound `shift`, so
the sum never overflows and relative precision is kept at the scale of
the dominant paths.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, INFINITY


def path_logsumexp(first_row, mats):
    """Same contract as the pure-Python fallback: log-sum-exp of path
    log-weights, paths rooted in `first_row` and extended by each (N, N)
    matrix in `mats`."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] row = np.ascontiguousarray(first_row, dtype=np.float64)
    cdef Py_ssize_t n = row.shape[0]
    cdef Py_ssize_t depth_total = len(mats)
    cdef double shift, best, w, total
    cdef Py_ssize_t t, i, j, d, s

    # upper bound on any path log-weight: sum of per-step maxima
    best = -INFINITY
    for i in range(n):
        if row[i] > best:
            best = row[i]
    if best == -INFINITY:
        return -INFINITY
    shift = best

    cdef cnp.ndarray[cnp.float64_t, ndim=3] stacked
    if depth_total > 0:
        stacked = np.ascontiguousarray(np.stack([np.asarray(m, dtype=np.float64) for m in mats]))
        if stacked.shape[1] != n or stacked.shape[2] != n:
            raise ValueError("path matrices must be square and match the first row")
        for t in range(depth_total):
            best = -INFINITY
            for i in range(n):
                for j in range(n):
                    w = stacked[t, i, j]
                    if w > best:
                        best = w
            if best == -INFINITY:
                return -INFINITY
            shift += best

    cdef cnp.ndarray[cnp.float64_t, ndim=1] acc = np.empty(depth_total + 1, dtype=np.float64)
    cdef cnp.ndarray[cnp.intp_t, ndim=1] state = np.empty(depth_total + 1, dtype=np.intp)
    cdef cnp.ndarray[cnp.intp_t, ndim=1] cursor = np.zeros(depth_total + 2, dtype=np.intp)

    total = 0.0
    cdef Py_ssize_t depth = 0
    cdef bint advanced
    cursor[0] = 0
    # depth 0 consumes first_row; depth d >= 1 consumes stacked[d - 1]
    while True:
        if depth == depth_total + 1:
            total += exp(acc[depth - 1] - shift)
            depth -= 1
            if depth < 0:
                break
            continue
        advanced = False
        if depth == 0:
            while cursor[0] < n:
                j = cursor[0]
                cursor[0] += 1
                w = row[j]
                if w == -INFINITY:
                    continue
                acc[0] = w
                state[0] = j
                cursor[1] = 0
                depth = 1
                advanced = True
                break
        else:
            s = state[depth - 1]
            while cursor[depth] < n:
                j = cursor[depth]
                cursor[depth] += 1
                w = stacked[depth - 1, s, j]
                if w == -INFINITY:
                    continue
                acc[depth] = acc[depth - 1] + w
                state[depth] = j
                cursor[depth + 1] = 0
                depth += 1
                advanced = True
                break
        if not advanced:
            depth -= 1
            if depth < 0:
                break

    if total == 0.0:
        return -INFINITY
    return shift + log(total)
