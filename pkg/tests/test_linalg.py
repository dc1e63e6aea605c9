import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from kvshield import linalg
from kvshield.errors import ShapeError


def naive_matmul(a, b):
    """Triple loop in the operands' precision, inner index ascending."""
    dt = np.result_type(a, b).type
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=dt)
    for i in range(m):
        for j in range(n):
            acc = dt(0)
            for t in range(k):
                acc = dt(acc + dt(a[i, t]) * dt(b[t, j]))
            out[i, j] = acc
    return out


def test_identity_times_b():
    b = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(linalg.matmul(np.eye(3), b), b)


def test_column_swap():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert linalg.matmul(a, swap).tolist() == [[2.0, 1.0], [4.0, 3.0]]


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_matmul_matches_naive_oracle_bit_exact(dtype):
    rng = np.random.default_rng(5)
    a = rng.standard_normal((5, 4)).astype(dtype)
    b = rng.standard_normal((4, 3)).astype(dtype)
    got = linalg.matmul(a, b)
    assert got.dtype == dtype
    assert np.array_equal(got, naive_matmul(a, b))


def test_large_matmul_takes_loop_path_and_stays_exact():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((3, 1500))
    b = rng.standard_normal((1500, 1000))
    assert 3 * 1500 * 1000 > linalg._ACCUMULATE_LIMIT
    got = linalg.matmul(a, b)
    ref = naive_matmul(a[:, :], b[:, :7])
    assert np.array_equal(got[:, :7], ref)


def test_fast_path_matches_reference_within_tolerance():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((16, 64))
    b = rng.standard_normal((64, 32))
    np.testing.assert_allclose(linalg.matmul_fast(a, b), linalg.matmul(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        linalg.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    assert np.allclose(linalg.row_softmax(np.zeros((1, 3))), 1 / 3)
    assert linalg.row_softmax(np.array([[7.5]])).tolist() == [[1.0]]
    big = linalg.row_softmax(np.array([[1000.0, 1001.0]]))
    shifted = np.exp(np.array([-1.0, 0.0]))
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big[0], shifted / shifted.sum(), rtol=1e-15)


def test_softmax_empty_is_shape_error():
    with pytest.raises(ShapeError):
        linalg.row_softmax(np.zeros((0, 3)))


def test_transpose():
    m = np.random.default_rng(1).standard_normal((3, 4))
    t = linalg.transpose(m)
    assert t.shape == (4, 3)
    for i in range(3):
        for j in range(4):
            assert t[j, i] == m[i, j]
    assert np.array_equal(linalg.transpose(t), m)
    assert linalg.transpose(np.ones((1, 5))).shape == (5, 1)


def test_as_matrix_precision():
    assert linalg.as_matrix([[1, 2]], "f32").dtype == np.float32
    assert linalg.as_matrix([[1, 2]]).dtype == np.float64
    with pytest.raises(ShapeError):
        linalg.as_matrix([1, 2])


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one_f64(m):
    s = linalg.row_softmax(m)
    assert np.all(s >= 0)
    assert np.all(np.abs(s.sum(axis=1) - 1) <= 1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-50, 50, width=32)))
def test_softmax_rows_sum_to_one_f32(m):
    s = linalg.row_softmax(m)
    assert s.dtype == np.float32
    assert np.all(np.abs(s.astype(np.float64).sum(axis=1) - 1) <= 1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_matmul_oracle_property(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    assert np.array_equal(linalg.matmul(a, b), naive_matmul(a, b))
