#!/usr/bin/env python3
"""Benchmark the exhaustive path-reduction kernel: compiled core vs the
pure-numpy fallback, on the transition matrices of a random all-two-valued
instance (64 complete states, deterministic level-2 hold every other step).

Run after building the package:  python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from ascontrol import chains
from ascontrol._kernels import _py
from ascontrol.instances import random_instance
from ascontrol.logspace import safe_log
from ascontrol.model import CompleteState

try:
    from ascontrol._kernels import _core
except ImportError:
    _core = None


def nonzero_paths(first, mats):
    count = int(np.count_nonzero(np.isfinite(first)))
    for m in mats:
        count *= int(np.max(np.count_nonzero(np.isfinite(m), axis=1)))
    return count


def main():
    gen, _, _ = random_instance(0)
    x0 = CompleteState(0, 0, 0, 0, 0, 0)
    print(f"{'T':>2} {'paths':>12} {'fallback':>12} {'compiled':>12} {'speedup':>8}")
    for T in range(1, 6):
        logmats = chains.step_matrices(
            lambda tick: safe_log(chains.transition_matrix(gen, tick)),
            gen.spec, T)
        first, rest = logmats[0][x0.flat(gen.spec)], logmats[1:]
        n_paths = nonzero_paths(first, rest)

        t0 = time.perf_counter()
        ref = _py.path_logsumexp(first, rest)
        t_py = time.perf_counter() - t0

        if _core is None:
            print(f"{T:>2} {n_paths:>12} {t_py:>11.3f}s {'-':>12} {'-':>8}")
            continue
        t0 = time.perf_counter()
        got = _core.path_logsumexp(first, rest)
        t_c = time.perf_counter() - t0
        assert abs(got - ref) < 1e-9, (got, ref)
        print(f"{T:>2} {n_paths:>12} {t_py:>11.3f}s {t_c:>11.3f}s "
              f"{t_py / t_c:>7.1f}x")
    if _core is None:
        print("compiled kernel not built; install with Cython and a C compiler")


if __name__ == "__main__":
    main()
