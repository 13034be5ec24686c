"""The compiled and fallback path-reduction kernels must agree with each
other and with a direct itertools enumeration."""

import itertools
import math

import numpy as np
import pytest

from ascontrol._kernels import _py, backend_name
from ascontrol.logspace import logsumexp

try:
    from ascontrol._kernels import _core
except ImportError:
    _core = None


def direct_reduce(first_row, mats):
    n = first_row.shape[0]
    T = len(mats) + 1
    vals = []
    for path in itertools.product(range(n), repeat=T):
        lp = first_row[path[0]]
        for t, mat in enumerate(mats):
            lp += mat[path[t], path[t + 1]]
        vals.append(lp)
    return logsumexp(np.array(vals))


def random_mats(rng, n, T, with_zeros=False):
    first = rng.standard_normal(n)
    mats = [rng.standard_normal((n, n)) for _ in range(T - 1)]
    if with_zeros:
        first[rng.random(n) < 0.3] = -np.inf
        for m in mats:
            m[rng.random((n, n)) < 0.3] = -np.inf
    return first, mats


@pytest.mark.parametrize("with_zeros", [False, True])
@pytest.mark.parametrize("n,T", [(2, 1), (3, 3), (4, 4)])
def test_fallback_matches_direct(n, T, with_zeros):
    rng = np.random.default_rng(n * 10 + T)
    first, mats = random_mats(rng, n, T, with_zeros)
    expect = direct_reduce(first, mats)
    got = _py.path_logsumexp(first, mats)
    if expect == -math.inf:
        assert got == -math.inf
    else:
        assert got == pytest.approx(expect, abs=1e-10)


def test_fallback_chunked_matches_unchunked():
    rng = np.random.default_rng(5)
    first, mats = random_mats(rng, 5, 5)
    full = _py.path_logsumexp(first, mats)
    chunked = _py.path_logsumexp(first, mats, chunk=16)
    assert chunked == pytest.approx(full, abs=1e-10)
    # deterministic: identical reruns bit-identical
    assert _py.path_logsumexp(first, mats, chunk=16) == chunked


@pytest.mark.skipif(_core is None, reason="compiled kernel not built")
@pytest.mark.parametrize("with_zeros", [False, True])
def test_compiled_matches_fallback(with_zeros):
    rng = np.random.default_rng(9)
    for n, T in ((2, 1), (3, 4), (6, 5), (8, 3)):
        first, mats = random_mats(rng, n, T, with_zeros)
        a = _py.path_logsumexp(first, mats)
        b = _core.path_logsumexp(first, mats)
        if a == -math.inf:
            assert b == -math.inf
        else:
            assert b == pytest.approx(a, abs=1e-10)


def test_all_blocked_paths():
    first = np.array([-np.inf, -np.inf])
    assert _py.path_logsumexp(first, []) == -math.inf
    if _core is not None:
        assert _core.path_logsumexp(first, []) == -math.inf


def test_probability_mass_identity():
    # log-probability matrices reduce to log(1)
    rng = np.random.default_rng(3)
    n = 6
    first = np.log(rng.dirichlet(np.ones(n)))
    mats = [np.log(rng.dirichlet(np.ones(n), size=n)) for _ in range(3)]
    assert _py.path_logsumexp(first, mats) == pytest.approx(0.0, abs=1e-12)
    if _core is not None:
        assert _core.path_logsumexp(first, mats) == pytest.approx(0.0, abs=1e-12)


def test_backend_name():
    assert backend_name() in ("python", "compiled")
