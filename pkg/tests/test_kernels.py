import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from civdg import _backend

PY = _backend.load("python")
try:
    CY = _backend.load("cython")
except ImportError:  # extension not built
    CY = None

needs_cython = pytest.mark.skipif(CY is None, reason="compiled kernels not built")


def test_selected_backend_is_known():
    assert _backend.BACKEND in ("cython", "python")
    assert PY.BACKEND == "python"


@needs_cython
@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 7), st.integers(1, 6), st.integers(0, 2**31))
def test_dense_kernels_agree(B, n, m, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(B, n))
    W = rng.normal(size=(m, n))
    b = rng.normal(size=m)
    dout = rng.normal(size=(B, m))
    assert np.allclose(CY.affine_forward(x, W, b), PY.affine_forward(x, W, b), rtol=1e-12, atol=1e-12)
    for got, want in zip(CY.affine_backward(dout, x, W), PY.affine_backward(dout, x, W)):
        assert np.allclose(got, want, rtol=1e-12, atol=1e-12)
    # elementwise kernels are exact
    assert np.array_equal(CY.leaky_relu(x, 0.1), PY.leaky_relu(x, 0.1))
    g = rng.normal(size=x.shape)
    assert np.array_equal(CY.leaky_relu_backward(g, x, 0.1), PY.leaky_relu_backward(g, x, 0.1))


@needs_cython
@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(1, 4), st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**31))
def test_moment_kernels_agree(B, C, M, K, seed):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=(B, C))
    c = rng.normal(size=(B, M))
    d = rng.integers(0, K, B).astype(np.int64)
    assert np.allclose(CY.moment_matrix(e, c), PY.moment_matrix(e, c), rtol=1e-12, atol=1e-13)
    s_cy, n_cy = CY.stratum_sums(c, d, K)
    s_py, n_py = PY.stratum_sums(c, d, K)
    assert np.allclose(s_cy, s_py, rtol=1e-12, atol=1e-12)
    assert np.array_equal(n_cy, n_py)


@needs_cython
@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**31))
def test_power_iteration_agrees(m, n, iters, seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(m, n))
    u = rng.normal(size=m)
    u /= np.linalg.norm(u)
    u1, v1, s1 = CY.power_iteration(W, u.copy(), iters)
    u2, v2, s2 = PY.power_iteration(W, u.copy(), iters)
    assert np.allclose(u1, u2, atol=1e-12)
    assert np.allclose(v1, v2, atol=1e-12)
    assert s1 == pytest.approx(s2, rel=1e-12, abs=1e-12)


@needs_cython
@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31))
def test_auroc_agrees(n, seed):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.random(n), 1)  # coarse rounding forces ties
    labels = np.zeros(n, dtype=np.int64)
    labels[: max(1, n // 3)] = 1
    rng.shuffle(labels)
    assert CY.auroc(scores, labels) == pytest.approx(PY.auroc(scores, labels), abs=1e-14)


def test_auroc_pair_counting_example():
    scores = np.array([0.1, 0.4, 0.35, 0.8])
    labels = np.array([0, 0, 1, 1])
    assert PY.auroc(scores, labels) == 0.75
    if CY is not None:
        assert CY.auroc(scores, labels) == 0.75
