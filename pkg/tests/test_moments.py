import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from civdg.errors import ColdStratumError, DimensionError, ValidationError
from civdg.moments import (
    MomentState,
    center_instruments,
    compute_residuals,
    exact_center,
    gmm_loss,
    gmm_loss_grad,
    moment_batch,
    moment_matrix,
)


def test_residual_examples():
    p = np.array([[0.3, 0.7]])
    assert not compute_residuals(p, p).any()
    assert compute_residuals(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]])).tolist() == [[0.5, -0.5]]
    with pytest.raises(DimensionError):
        compute_residuals(np.ones((2, 2)), np.ones((2, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10), st.integers(2, 5), st.integers(0, 2**31))
def test_single_label_residual_rows_sum_to_zero(B, C, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(B, C))
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    y = np.eye(C)[rng.integers(0, C, B)]
    e = compute_residuals(y, p)
    assert np.abs(e.sum(axis=1)).max() < 1e-12
    assert np.all(np.abs(e) <= 1.0)


def test_first_sight_constant_output():
    state = MomentState.create(3, 2)
    c = np.tile([1.5, -2.0], (4, 1))
    d = np.array([0, 2, 0, 2])
    c_t, new = center_instruments(c, d, state, training=True)
    assert not c_t.any()
    assert new.mu[0].tolist() == [1.5, -2.0] and new.mu[2].tolist() == [1.5, -2.0]
    assert new.initialized.tolist() == [True, False, True]
    assert not state.initialized.any()  # input state untouched


def test_hand_ema_example():
    state = MomentState(np.array([[1.0], [7.0]]), np.array([True, True]), 0.9)
    c_t, new = center_instruments(np.array([[2.0], [4.0]]), np.array([0, 0]), state, training=True)
    assert c_t.tolist() == [[1.0], [3.0]]
    assert new.mu[0, 0] == pytest.approx(1.2, abs=1e-15)
    # absent stratum is skipped bitwise
    assert new.mu[1].tobytes() == state.mu[1].tobytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_skip_rule_bitwise(seed):
    rng = np.random.default_rng(seed)
    K, M = 4, 3
    state = MomentState(rng.normal(size=(K, M)), rng.random(K) < 0.5, 0.9)
    present = rng.choice(K, size=2, replace=False)
    d = rng.choice(present, size=6)
    _, new = center_instruments(rng.normal(size=(6, M)), d, state, training=True)
    for k in range(K):
        if k not in d:
            assert new.mu[k].tobytes() == state.mu[k].tobytes()
            assert new.initialized[k] == state.initialized[k]
        else:
            assert new.initialized[k]


def test_eval_never_mutates_and_cold_stratum_raises():
    state = MomentState(np.array([[1.0], [0.0]]), np.array([True, False]), 0.9)
    snap = state.copy()
    c_t, same = center_instruments(np.array([[3.0]]), np.array([0]), state, training=False)
    assert c_t.tolist() == [[2.0]]
    assert same.equal(snap) and state.equal(snap)
    with pytest.raises(ColdStratumError):
        center_instruments(np.array([[3.0]]), np.array([1]), state, training=False)


def test_ema_converges_to_stratum_means():
    rng = np.random.default_rng(0)
    truth = np.array([[0.5, -1.0], [2.0, 0.25]])
    state = MomentState.create(2, 2)
    for _ in range(500):
        d = rng.integers(0, 2, 64)
        c = truth[d] + 0.05 * rng.normal(size=(64, 2))
        _, state = center_instruments(c, d, state, training=True)
    assert np.abs(state.mu - truth).max() < 1e-2


def test_moment_matrix_examples():
    m = moment_matrix(np.array([[1.0, -1.0]]), np.array([[2.0, 0.0, 1.0]]))
    assert m.tolist() == [[2.0, 0.0, 1.0], [-2.0, 0.0, -1.0]]
    assert not moment_matrix(np.zeros((3, 2)), np.ones((3, 4))).any()
    with pytest.raises(ValidationError):
        moment_matrix(np.zeros((0, 2)), np.zeros((0, 3)))
    with pytest.raises(DimensionError):
        moment_matrix(np.zeros((2, 2)), np.zeros((3, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31))
def test_moment_matrix_brute_force_and_bilinear(B, C, M, seed):
    rng = np.random.default_rng(seed)
    e, c = rng.normal(size=(B, C)), rng.normal(size=(B, M))
    m = moment_matrix(e, c)
    ref = np.zeros((C, M))
    for i in range(B):
        for a in range(C):
            for k in range(M):
                ref[a, k] += e[i, a] * c[i, k]
    assert np.abs(m - ref / B).max() < 1e-12
    assert np.abs(moment_matrix(e, 2.5 * c) - 2.5 * m).max() < 1e-12


def test_gmm_loss_examples():
    assert gmm_loss(np.zeros((2, 3))) == 0.0
    assert gmm_loss(np.array([[3.0, 4.0]])) == 25.0
    assert gmm_loss_grad(np.array([[1.0, -2.0]])).tolist() == [[2.0, -4.0]]


def test_exact_center_examples():
    assert exact_center(np.array([[1.0], [3.0]]), np.array([0, 0])).tolist() == [[-1.0], [1.0]]
    rng = np.random.default_rng(0)
    c = rng.normal(size=(9, 3))
    out = exact_center(c, np.zeros(9, dtype=int))
    assert np.abs(out.mean(axis=0)).max() < 1e-12
    # K = 1 reduces exactly to global mean centering
    assert out.tobytes() == (c - c.sum(axis=0) / 9).tobytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**31))
def test_exact_center_orthogonal_to_functions_of_d(B, K, M, seed):
    rng = np.random.default_rng(seed)
    c = rng.normal(scale=5.0, size=(B, M))
    d = rng.integers(0, K, B)
    f = rng.normal(size=K)
    inner = (f[d][:, None] * exact_center(c, d, K)).sum(axis=0)
    assert np.all(np.abs(inner) < 1e-10 * B * np.abs(f).max() * np.abs(c).max())


def test_moment_batch_counts():
    state = MomentState.create(3, 2)
    y = np.eye(2)[[0, 1, 1, 0]]
    p = np.full((4, 2), 0.5)
    mb, new = moment_batch(y, p, np.ones((4, 2)), np.array([0, 0, 2, 2]), state, True)
    assert mb.counts.tolist() == [2, 0, 2]
    assert mb.counts.sum() == 4
    assert mb.moment.shape == (2, 2)
    assert new.initialized.tolist() == [True, False, True]
