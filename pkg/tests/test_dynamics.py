import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from covsteer.dynamics import (
    DimensionError,
    LinearSystemSchedule,
    assemble_block_operators,
    double_integrator_2d,
    selector,
    transition_product,
)


def random_system(rng, N, nx, nu, nw):
    return LinearSystemSchedule(
        [rng.normal(size=(nx, nx)) * 0.5 for _ in range(N)],
        [rng.normal(size=(nx, nu)) for _ in range(N)],
        [rng.normal(size=(nx, nw)) for _ in range(N)],
    )


def simulate(sys, x0, U, W):
    xs = [x0]
    for k in range(sys.horizon):
        xs.append(sys.step(k, xs[-1], U[k], W[k]))
    return np.concatenate(xs)


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    N=st.integers(1, 6),
    nx=st.integers(1, 4),
    nu=st.integers(1, 3),
    nw=st.integers(1, 3),
)
def test_stacked_operators_match_recursion(seed, N, nx, nu, nw):
    rng = np.random.default_rng(seed)
    sys = random_system(rng, N, nx, nu, nw)
    ops = assemble_block_operators(sys)
    x0 = rng.normal(size=nx)
    U = rng.normal(size=(N, nu))
    W = rng.normal(size=(N, nw))
    X = ops.stack(x0, U.ravel(), W.ravel())
    np.testing.assert_allclose(X, simulate(sys, x0, U, W), rtol=1e-11, atol=1e-11)


def test_block_shapes_and_causality(rng):
    sys = random_system(rng, 5, 3, 2, 2)
    ops = assemble_block_operators(sys)
    assert ops.calA.shape == (18, 3)
    assert ops.calB.shape == (18, 10)
    assert ops.calD.shape == (18, 10)
    for k in range(6):
        for j in range(5):
            blk = ops.block_B(k, j)
            if j >= k:
                assert not blk.any()
            elif j == k - 1:
                np.testing.assert_array_equal(blk, sys.B[j])
            else:
                np.testing.assert_allclose(blk, transition_product(sys, k - 1, j + 1) @ sys.B[j])


def test_transition_product_order(rng):
    sys = random_system(rng, 4, 3, 1, 1)
    np.testing.assert_allclose(transition_product(sys, 2, 0), sys.A[2] @ sys.A[1] @ sys.A[0])
    np.testing.assert_array_equal(transition_product(sys, 1, 1), sys.A[1])
    with pytest.raises(IndexError):
        transition_product(sys, 0, 1)
    with pytest.raises(IndexError):
        transition_product(sys, 4, 0)


def test_double_integrator_matrices():
    sys = double_integrator_2d(0.2, 3, noise_scale=0.01)
    A, B, D = sys.A[0], sys.B[0], sys.D[0]
    np.testing.assert_array_equal(A[:2, 2:], 0.2 * np.eye(2))
    np.testing.assert_allclose(B, [[0.02, 0], [0, 0.02], [0.2, 0], [0, 0.2]])
    np.testing.assert_array_equal(D, 0.01 * np.eye(4))


def test_selector_extracts_block(rng):
    X = rng.normal(size=12)
    np.testing.assert_array_equal(selector(2, 3, 3) @ X, X[6:9])
    with pytest.raises(IndexError):
        selector(4, 3, 3)


def test_dimension_errors():
    with pytest.raises(DimensionError):
        LinearSystemSchedule([np.eye(2)], [np.ones((2, 1))] * 2, [np.eye(2)])
    with pytest.raises(DimensionError):
        LinearSystemSchedule([np.eye(2)], [np.ones((3, 1))], [np.eye(2)])
    with pytest.raises(DimensionError):
        LinearSystemSchedule.time_invariant(np.eye(2), np.ones((2, 1)), np.eye(2), 0)


def test_operators_are_read_only(rng):
    ops = assemble_block_operators(random_system(rng, 2, 2, 1, 1))
    with pytest.raises(ValueError):
        ops.calB[0, 0] = 1.0
