"""Numerically stable log-space primitives.

All probability accumulation in the package goes through these helpers:
max-shifted log-sum-exp that tolerates -inf entries, and a deterministic
pairwise-tree reduction so partitioned sums are bit-stable regardless of
how many chunks the caller split the work into.
"""

import numpy as np

NEG_INF = float("-inf")


def safe_log(x):
    """log with log(0) = -inf and no warning noise."""
    with np.errstate(divide="ignore"):
        return np.log(x)


def logsumexp(a, axis=None):
    """Max-shifted log(sum(exp(a))); returns -inf for an all--inf input."""
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return NEG_INF if axis is None else np.full(np.delete(a.shape, axis), NEG_INF)
    amax = np.max(a, axis=axis, keepdims=True)
    with np.errstate(invalid="ignore"):
        shifted = np.where(np.isfinite(amax), a - amax, NEG_INF)
    with np.errstate(over="ignore", divide="ignore"):
        s = np.sum(np.exp(shifted), axis=axis, keepdims=True)
        out = np.where(np.isfinite(amax), amax + np.log(s), amax)
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def logmeanexp(a, axis=None):
    a = np.asarray(a, dtype=float)
    n = a.size if axis is None else a.shape[axis]
    return logsumexp(a, axis=axis) - np.log(n)


def pairwise_logsumexp(parts):
    """Reduce a sequence of log-values with a fixed pairwise tree.

    The reduction order depends only on len(parts), so partitioned
    enumerations reduce to bit-identical results across runs.
    """
    vals = [float(p) for p in parts]
    if not vals:
        return NEG_INF
    while len(vals) > 1:
        nxt = []
        for i in range(0, len(vals) - 1, 2):
            nxt.append(_lse2(vals[i], vals[i + 1]))
        if len(vals) % 2:
            nxt.append(vals[-1])
        vals = nxt
    return vals[0]


def _lse2(x, y):
    if x == NEG_INF:
        return y
    if y == NEG_INF:
        return x
    hi, lo = (x, y) if x >= y else (y, x)
    return hi + np.log1p(np.exp(lo - hi))


def kl_divergence(q, p):
    """KL(q || p) for probability vectors, with 0 * log(0/x) = 0.

    Returns +inf where q places mass outside p's support.
    """
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    mask = q > 0.0
    if np.any(p[mask] == 0.0):
        return float("inf")
    qm = q[mask]
    return float(np.sum(qm * (np.log(qm) - np.log(p[mask]))))
