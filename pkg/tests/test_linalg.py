import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from edgevit import _kernels, linalg
from edgevit.errors import DimensionError, NumericError

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_matmul_identity():
    a = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(linalg.matmul(np.eye(3), a), a)


def test_matmul_hand_example():
    out = linalg.matmul([[1, 2], [3, 4]], [[0], [1]])
    np.testing.assert_array_equal(out, [[2.0], [4.0]])
    assert out.dtype == np.float64


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        linalg.matmul(np.ones((2, 3)), np.ones((4, 5)))


def test_matmul_associative():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b, c = (rng.standard_normal((4, 4)) for _ in range(3))
        left = linalg.matmul(linalg.matmul(a, b), c)
        right = linalg.matmul(a, linalg.matmul(b, c))
        assert np.max(np.abs(left - right)) <= 1e-4 * max(1.0, np.max(np.abs(left)))


def test_softmax_examples():
    np.testing.assert_allclose(linalg.softmax_rows([[0.0, 0.0, 0.0]]), [[1 / 3] * 3], atol=1e-12)
    out = linalg.softmax_rows([[1000.0, 0.0]])
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-12)
    np.testing.assert_allclose(linalg.softmax_rows([[math.log(2), 0.0]]), [[2 / 3, 1 / 3]],
                               atol=1e-12)


@given(hnp.arrays(np.float64, (3, 5), elements=finite), finite)
def test_softmax_shift_invariant(a, c):
    np.testing.assert_allclose(linalg.softmax_rows(a), linalg.softmax_rows(a + c), atol=1e-6)


@given(hnp.arrays(np.float64, (4, 6), elements=finite))
def test_softmax_rows_sum_to_one(a):
    np.testing.assert_allclose(linalg.softmax_rows(a).sum(axis=1), 1.0, atol=1e-12)


def test_gelu_examples():
    assert linalg.gelu(np.array([0.0]))[0] == 0.0
    assert abs(linalg.gelu(np.array([10.0]))[0] - 10.0) < 1e-6
    # x * Phi(x) with Phi from math.erf
    assert abs(linalg.gelu(np.array([1.0]))[0] - 0.841345) < 1e-6
    assert abs(linalg.gelu(np.array([1.0]))[0] - 0.5 * (1 + math.erf(1 / math.sqrt(2)))) < 1e-15


def test_gelu_grad_matches_difference():
    x = np.linspace(-4, 4, 33)
    h = 1e-6
    fd = (linalg.gelu(x + h) - linalg.gelu(x - h)) / (2 * h)
    np.testing.assert_allclose(linalg.gelu_grad(x), fd, atol=1e-8)


def test_layernorm_examples():
    out = linalg.layernorm(np.array([[2.0, 2.0, 2.0]]), np.ones(3), np.zeros(3))
    np.testing.assert_array_equal(out, np.zeros((1, 3)))
    out = linalg.layernorm(np.array([[1.0, 5.0, -2.0]]), np.zeros(3), np.full(3, 0.7))
    np.testing.assert_allclose(out, np.full((1, 3), 0.7))
    out = linalg.layernorm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2), eps=1e-12)
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-9)


@given(hnp.arrays(np.float64, (2, 6), elements=st.floats(-10, 10)),
       st.floats(-5, 5), st.floats(0.5, 4))
def test_layernorm_shift_scale_invariant(x, shift, scale):
    x = x + np.arange(6)  # keep the variance away from zero
    g, b = np.ones(6), np.zeros(6)
    np.testing.assert_allclose(linalg.layernorm(x, g, b, eps=1e-12),
                               linalg.layernorm(scale * x + shift, g, b, eps=1e-12), atol=1e-4)


def test_layernorm_backward_matches_difference():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 5))
    g = rng.standard_normal(5)
    dy = rng.standard_normal((3, 5))
    _, xhat, rstd = linalg.layernorm(x, g, np.zeros(5), return_cache=True)
    dx = linalg.layernorm_backward(dy, xhat, rstd, g)
    h = 1e-6
    for i, j in [(0, 0), (1, 3), (2, 4)]:
        xp, xm = x.copy(), x.copy()
        xp[i, j] += h
        xm[i, j] -= h
        fd = ((linalg.layernorm(xp, g, np.zeros(5)) - linalg.layernorm(xm, g, np.zeros(5))) * dy
              ).sum() / (2 * h)
        assert abs(fd - dx[i, j]) < 1e-6


def test_svd_diagonal():
    f = linalg.svd(np.diag([3.0, 1.0]))
    np.testing.assert_allclose(f.sigma, [3.0, 1.0], atol=1e-12)


def test_svd_rank_one():
    u, v = np.array([1.0, 2.0, 2.0]), np.array([3.0, 4.0])
    f = linalg.svd(np.outer(u, v))
    np.testing.assert_allclose(f.sigma, [np.linalg.norm(u) * np.linalg.norm(v), 0.0], atol=1e-9)
    np.testing.assert_allclose(f.u.T @ f.u, np.eye(2), atol=1e-9)


def test_svd_reconstructs_seed7():
    a = np.random.default_rng(7).standard_normal((4, 4))
    f = linalg.svd(a)
    assert np.max(np.abs(f.u @ np.diag(f.sigma) @ f.vt - a)) < 1e-4


@pytest.mark.parametrize("shape", [(5, 3), (3, 5), (1, 4), (6, 6), (64, 64), (17, 40)])
def test_svd_properties(shape):
    a = np.random.default_rng(sum(shape)).standard_normal(shape)
    f = linalg.svd(a)
    r = min(shape)
    assert f.u.shape == (shape[0], r) and f.vt.shape == (r, shape[1])
    np.testing.assert_allclose(f.reconstruct(), a, atol=1e-9)
    np.testing.assert_allclose(f.u.T @ f.u, np.eye(r), atol=1e-9)
    np.testing.assert_allclose(f.vt @ f.vt.T, np.eye(r), atol=1e-9)
    assert np.all(np.diff(f.sigma) <= 1e-12)
    np.testing.assert_allclose(f.sigma, np.linalg.svd(a, compute_uv=False), rtol=1e-9)
    # energy identity
    assert abs((f.sigma ** 2).sum() - (a ** 2).sum()) <= 1e-3 * (a ** 2).sum()


def test_svd_sign_convention_and_determinism():
    a = np.random.default_rng(11).standard_normal((6, 4))
    f, g = linalg.svd(a), linalg.svd(a)
    np.testing.assert_array_equal(f.u, g.u)
    np.testing.assert_array_equal(f.sigma, g.sigma)
    for k in range(4):
        col = f.u[:, k]
        first = col[np.flatnonzero(np.abs(col) > 1e-12)[0]]
        assert first > 0


def test_svd_rank_deficient_completes_basis():
    a = np.zeros((4, 3))
    a[0, 0] = 2.0
    f = linalg.svd(a)
    np.testing.assert_allclose(f.sigma, [2.0, 0.0, 0.0])
    np.testing.assert_allclose(f.u.T @ f.u, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(f.reconstruct(), a, atol=1e-12)


def test_svd_non_convergence_reports_residual():
    a = np.random.default_rng(0).standard_normal((8, 8))
    with pytest.raises(NumericError) as info:
        linalg.svd(a, max_sweeps=1)
    assert info.value.residual is not None and info.value.residual > 0


def test_svd_rejects_nonfinite():
    with pytest.raises(NumericError):
        linalg.svd(np.array([[np.nan, 1.0], [0.0, 1.0]]))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 7)),
                  elements=st.floats(-100, 100)))
def test_svd_energy_identity_property(a):
    f = linalg.svd(a)
    total = (a ** 2).sum()
    assert abs((f.sigma ** 2).sum() - total) <= 1e-3 * max(total, 1e-12) + 1e-9


@pytest.mark.skipif(_kernels.numba_impl is None, reason="numba unavailable")
def test_backends_agree():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((7, 9)) * 3
    nb, npi = _kernels.numba_impl, _kernels.numpy_impl
    np.testing.assert_allclose(nb.gelu(x), npi.gelu(x), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(nb.gelu_grad(x), npi.gelu_grad(x), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(nb.softmax_rows_jit(x.copy()), npi.softmax_rows(x.copy()), atol=1e-14)
    g, b = rng.standard_normal(9), rng.standard_normal(9)
    for u, w in zip(nb.layernorm_rows(x, g, b, 1e-6), npi.layernorm_rows(x, g, b, 1e-6)):
        np.testing.assert_allclose(u, w, atol=1e-12)


@pytest.mark.skipif(_kernels.numba_impl is None, reason="numba unavailable")
def test_svd_same_under_both_backends():
    a = np.random.default_rng(2).standard_normal((9, 6))
    before = _kernels.backend_name()
    try:
        _kernels.use_backend("numpy")
        f = linalg.svd(a)
        _kernels.use_backend("numba")
        g = linalg.svd(a)
    finally:
        _kernels.use_backend(before)
    np.testing.assert_allclose(f.sigma, g.sigma, atol=1e-10)
    np.testing.assert_allclose(np.abs(f.u.T @ g.u), np.eye(6), atol=1e-8)


def test_use_backend_rejects_unknown():
    with pytest.raises(ValueError):
        _kernels.use_backend("fortran")
