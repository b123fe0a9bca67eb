import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from miplab import ndmath as nd


def test_matmul_identity_and_hand_values():
    out = nd.matmul(np.eye(2), np.array([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])
    assert nd.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data[0, 0] == 11.0


def test_matmul_matches_loop_oracle():
    rng = np.random.default_rng(0)
    A, B = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
    ref = np.zeros((4, 2))
    for i in range(4):
        for j in range(2):
            for k in range(3):
                ref[i, j] += A[i, k] * B[k, j]
    np.testing.assert_allclose(nd.matmul(A, B).data, ref, atol=1e-12)


def test_backward_square_scalar():
    tape = nd.Tape()
    th = tape.leaf(3.0)
    (g,) = tape.backward(nd.square(th))
    assert g == pytest.approx(6.0)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    W0, x, y = rng.standard_normal((3, 4)), rng.standard_normal((5, 3)), rng.standard_normal((5, 4))

    def f(W):
        return float(np.sum((x @ W - y) ** 2))

    tape = nd.Tape()
    W = tape.leaf(W0)
    (g,) = tape.backward(nd.sum(nd.square(nd.sub(nd.matmul(x, W), y))))
    h = 1e-5
    fd = np.zeros_like(W0)
    for idx in np.ndindex(W0.shape):
        E = np.zeros_like(W0)
        E[idx] = h
        fd[idx] = (f(W0 + E) - f(W0 - E)) / (2 * h)
    assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-8)) <= 1e-5


def test_constant_loss_gives_zero_grads():
    tape = nd.Tape()
    w = tape.leaf(np.ones((2, 2)))
    c = tape.leaf(1.0)
    loss = nd.add(nd.scale(nd.sum(w), 0.0), c)
    gw, _ = tape.backward(loss)
    np.testing.assert_array_equal(gw, 0.0)


def test_tape_single_use():
    tape = nd.Tape()
    w = tape.leaf(2.0)
    loss = nd.square(w)
    tape.backward(loss)
    with pytest.raises(RuntimeError):
        tape.backward(loss)


def test_mixing_tapes_raises():
    a, b = nd.Tape().leaf(1.0), nd.Tape().leaf(2.0)
    with pytest.raises(ValueError):
        nd.add(a, b)


def test_rank3_rejected():
    with pytest.raises(ValueError):
        nd.Tensor(np.zeros((2, 2, 2)))


def test_nonfinite_detected():
    with pytest.raises(nd.NonFiniteError):
        nd.mul(np.array([np.inf]), np.array([0.0]))


def test_gelu_and_smooth_abs_gradients():
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((3, 2))
    for op, ref in ((nd.gelu, None), (nd.smooth_abs, None), (nd.relu, None)):
        tape = nd.Tape()
        x = tape.leaf(x0)
        (g,) = tape.backward(nd.sum(op(x)))
        h = 1e-6
        fd = np.zeros_like(x0)
        for idx in np.ndindex(x0.shape):
            E = np.zeros_like(x0)
            E[idx] = h
            fd[idx] = (nd.sum(op(x0 + E)).item() - nd.sum(op(x0 - E)).item()) / (2 * h)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)


def test_concat_and_row_sum_backward():
    tape = nd.Tape()
    a = tape.leaf(np.ones((2, 1)))
    b = tape.leaf(np.full((2, 2), 2.0))
    loss = nd.sum(nd.row_sum(nd.square(nd.concat([a, b]))))
    ga, gb = tape.backward(loss)
    np.testing.assert_allclose(ga, 2.0)
    np.testing.assert_allclose(gb, 4.0)


def test_bias_broadcast_unbroadcasts():
    tape = nd.Tape()
    b = tape.leaf(np.zeros(3))
    (g,) = tape.backward(nd.sum(nd.add(np.ones((4, 3)), b)))
    np.testing.assert_allclose(g, 4.0)


def test_solve_cases():
    B = np.arange(6.0).reshape(3, 2)
    np.testing.assert_allclose(nd.solve(np.eye(3), B), B)
    np.testing.assert_allclose(nd.solve(np.diag([2.0, 4.0]), np.eye(2)), np.diag([0.5, 0.25]))
    rng = np.random.default_rng(3)
    M = rng.standard_normal((5, 5))
    S = M @ M.T + 5 * np.eye(5)
    R = rng.standard_normal((5, 2))
    assert np.abs(S @ nd.solve(S, R) - R).max() <= 1e-8


def test_solve_rejects_singular_and_bad_shapes():
    with pytest.raises(nd.IllConditionedError):
        nd.solve(np.array([[1.0, 1.0], [1.0, 1.0]]), np.eye(2))
    with pytest.raises(ValueError):
        nd.solve(np.ones((2, 3)), np.ones(2))


def test_lstsq_residual_cases():
    A = np.array([[1.0], [0.0]])
    assert nd.lstsq_residual(A, [0.0, 1.0]) == pytest.approx(1.0)
    assert nd.lstsq_residual(A, [3.0, 0.0]) <= 1e-15
    rng = np.random.default_rng(4)
    A = rng.standard_normal((6, 3))
    a = rng.standard_normal(6)
    c = np.linalg.solve(A.T @ A, A.T @ a)
    assert abs(nd.lstsq_residual(A, a) - np.linalg.norm(a - A @ c)) <= 1e-9


def test_lstsq_residual_rank_deficient():
    # duplicated column: residual is that of the 1-column problem
    A = np.array([[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    assert nd.lstsq_residual(A, [1.0, 2.0, 0.0]) == pytest.approx(2.0)
    assert nd.lstsq_residual(np.zeros((3, 2)), [1.0, 2.0, 2.0]) == pytest.approx(3.0)


def test_lstsq_residual_l1():
    A = np.array([[1.0], [0.0]])
    assert nd.lstsq_residual_l1(A, [5.0, -2.0]) == pytest.approx(2.0)
    # L1 fit of a constant picks the median: residual sum |x - median|
    A = np.ones((3, 1))
    assert nd.lstsq_residual_l1(A, [0.0, 1.0, 5.0]) == pytest.approx(5.0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 2), elements=st.floats(-10, 10)), arrays(np.float64, 5, elements=st.floats(-10, 10)))
def test_lstsq_residual_bounds(A, a):
    r = nd.lstsq_residual(A, a)
    assert 0.0 <= r <= np.linalg.norm(a) * (1 + 1e-12) + 1e-12
