"""The compiled core must reproduce the pure-Python reference loops."""

import math

import numpy as np
import pytest

from infinet import _fallback
from infinet.learn import objectives

core = pytest.importorskip("infinet._core")


def _points(n, d, seed):
    x = np.random.default_rng(seed).standard_normal((n, d))
    return x


@pytest.mark.parametrize("act", [0, 1])
@pytest.mark.parametrize("depth,alpha", [(1, 0.0), (2, 0.5), (2, 2.0)])
def test_analytic_kernel_matrix(act, depth, alpha):
    xa, xb = _points(30, 6, 0), _points(20, 6, 1)
    for a, b, sym in ((xa, xa, True), (xa, xb, False)):
        dots = np.ascontiguousarray(a @ b.T)
        sa, sb = np.einsum("ij,ij->i", a, a), np.einsum("ij,ij->i", b, b)
        m1, c1 = core.analytic_kernel_matrix(dots, sa, sb, act, depth, alpha, sym, 1e-6)
        m2, c2 = _fallback.analytic_kernel_matrix(dots, sa, sb, act, depth, alpha, sym, 1e-6)
        assert c1 == c2
        assert np.allclose(m1, m2, rtol=1e-13, atol=1e-15)


def test_clamp_count_agrees():
    dots = np.array([[1.0 + 1e-3, 0.2], [0.2, 1.0]])
    sq = np.ones(2)
    _, c1 = core.analytic_kernel_matrix(dots, sq, sq, 0, 1, 0.0, False, 1e-6)
    _, c2 = _fallback.analytic_kernel_matrix(dots, sq, sq, 0, 1, 0.0, False, 1e-6)
    assert c1 == c2 == 1


def _eg_state(m=25, k=3, seed=2, lam=0.05):
    x = _points(m, 4, seed)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    G = np.ascontiguousarray(0.5 * (1 + x @ x.T) / 2)
    y = np.arange(m, dtype=np.int64) % k
    la = np.full((m, k), -math.log(k))
    _, _, _, S = objectives(G, y, la, lam)
    return G, y, la, np.ascontiguousarray(S)


@pytest.mark.parametrize("fixed", [False, True])
@pytest.mark.parametrize("inner", [1, 5])
def test_eg_epoch(fixed, inner):
    lam = 0.05
    G, y, la, S = _eg_state(lam=lam)
    m = len(y)
    order = np.random.default_rng(3).permutation(m).astype(np.int64)
    states = []
    for mod in (core, _fallback):
        la_, S_ = la.copy(), S.copy()
        eta = np.full(m, 0.7)
        upd = np.zeros(m, dtype=np.uint8)
        counts = [mod.eg_epoch(G, y, la_, S_, eta, lam, fixed, upd, order, inner) for _ in range(3)]
        states.append((counts, la_, S_, eta, upd))
    (c1, l1, s1, e1, u1), (c2, l2, s2, e2, u2) = states
    assert c1 == c2
    assert np.allclose(l1, l2, rtol=1e-10, atol=1e-12)
    assert np.allclose(s1, s2, rtol=1e-10, atol=1e-12)
    assert np.array_equal(e1, e2) and np.array_equal(u1, u2)


def test_pa_pass():
    G, y, _, _ = _eg_state(m=30, k=4, seed=5)
    m, k = len(y), 4
    order = np.arange(m, dtype=np.int64)
    out = []
    for mod in (core, _fallback):
        beta, S = np.zeros((m, k)), np.zeros((m, k))
        res = [mod.pa_pass(G, y, beta, S, order) for _ in range(2)]
        out.append((res, beta))
    assert out[0][0][0][:2] == out[1][0][0][:2]
    assert out[0][0][0][2] == pytest.approx(out[1][0][0][2], rel=1e-12)
    assert np.allclose(out[0][1], out[1][1], rtol=1e-12, atol=1e-14)


def test_backend_selection_env(monkeypatch):
    import importlib

    import infinet._backend as sel

    monkeypatch.setenv("INFINET_PURE_PYTHON", "1")
    try:
        assert importlib.reload(sel).NAME == "python"
    finally:
        monkeypatch.delenv("INFINET_PURE_PYTHON")
        importlib.reload(sel)
    assert sel.NAME == "cython"
