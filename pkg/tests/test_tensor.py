import math

import numpy as np
import pytest

from pagedgqa.tensor import (
    MaskedRowError,
    ShapeError,
    Tensor,
    matmul,
    reshape,
    row_softmax,
    transpose,
)


def test_matmul_scalar_product():
    out = matmul(Tensor([[2.0]]), Tensor([[3.0]]))
    assert out.shape == (1, 1)
    assert out.array[0, 0] == 6.0


def test_matmul_identity():
    rng = np.random.default_rng(7)
    m = Tensor(rng.standard_normal((3, 3)))
    out = matmul(Tensor(np.eye(3)), m)
    np.testing.assert_array_equal(out.array, m.array)


def test_matmul_2x2_hand_expansion():
    # (1,2;3,4)(5,6;7,8): row-by-column products expanded by hand.
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(
        matmul(a, b).array, np.array([[19.0, 22.0], [43.0, 50.0]], dtype=np.float32)
    )


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(err.value)


def test_matmul_rejects_non_matrix():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))


def test_matmul_associativity():
    rng = np.random.default_rng(11)
    for _ in range(20):
        m, k, n, p = rng.integers(1, 7, size=4)
        a = Tensor(rng.standard_normal((m, k)))
        b = Tensor(rng.standard_normal((k, n)))
        c = Tensor(rng.standard_normal((n, p)))
        left = matmul(matmul(a, b), c).array
        right = matmul(a, matmul(b, c)).array
        assert np.max(np.abs(left - right)) <= 1e-4


def test_transpose_row_vector():
    out = transpose(Tensor([[1.0, 2.0, 3.0]]))
    assert out.shape == (3, 1)
    np.testing.assert_array_equal(out.data, np.array([1, 2, 3], dtype=np.float32))


def test_transpose_involution():
    rng = np.random.default_rng(3)
    m = Tensor(rng.standard_normal((4, 5)))
    np.testing.assert_array_equal(transpose(transpose(m)).array, m.array)


def test_transpose_2x2():
    out = transpose(Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(
        out.array, np.array([[1.0, 3.0], [2.0, 4.0]], dtype=np.float32)
    )


def test_transpose_rank_error():
    with pytest.raises(ShapeError):
        transpose(Tensor(np.zeros((2, 2, 2))))


def test_row_softmax_uniform():
    out = row_softmax(Tensor([[0.0, 0.0, 0.0, 0.0]]))
    np.testing.assert_array_equal(out.array[0], np.full(4, 0.25, dtype=np.float32))


def test_row_softmax_single_column():
    out = row_softmax(Tensor([[123.0]]))
    assert out.array[0, 0] == 1.0


def test_row_softmax_matches_exact_logistic():
    # softmax([1000, 1001]) == (1/(1+e), 1/(1+e^-1)) exactly; naive exp would
    # overflow, so this also exercises max subtraction.
    out = row_softmax(Tensor([[1000.0, 1001.0]])).array[0]
    expected = np.array(
        [1.0 / (1.0 + math.exp(1.0)), 1.0 / (1.0 + math.exp(-1.0))],
        dtype=np.float32,
    )
    np.testing.assert_allclose(out, expected, rtol=1e-6)


def test_row_softmax_masked_entries_are_exactly_zero():
    out = row_softmax(Tensor([[0.5, -np.inf, 1.5, -np.inf]])).array[0]
    assert out[1] == 0.0 and out[3] == 0.0
    assert abs(out.sum() - 1.0) <= 1e-6


def test_row_softmax_all_masked_row_raises():
    with pytest.raises(MaskedRowError):
        row_softmax(Tensor([[1.0, 2.0], [-np.inf, -np.inf]]))


def test_row_softmax_rows_sum_to_one_across_magnitudes():
    rng = np.random.default_rng(23)
    for _ in range(50):
        rows, cols = rng.integers(1, 9, size=2)
        scale = rng.choice([1.0, 10.0, 1e3])
        m = rng.standard_normal((rows, cols)) * scale
        sums = row_softmax(Tensor(m)).array.sum(axis=1)
        assert np.max(np.abs(sums - 1.0)) <= 1e-6


def test_row_softmax_empty_rows_pass_through():
    out = row_softmax(Tensor(np.zeros((0, 5))))
    assert out.shape == (0, 5)


def test_reshape_preserves_order():
    t = Tensor([0.0, 1.0, 2.0, 3.0, 4.0, 5.0])
    out = reshape(t, (2, 3))
    np.testing.assert_array_equal(out.array[1], np.array([3, 4, 5], dtype=np.float32))


def test_reshape_roundtrip_flatten_bit_exact():
    rng = np.random.default_rng(5)
    t = Tensor(rng.standard_normal((2, 3)))
    out = reshape(t, (3, 2))
    assert out.data.tobytes() == t.data.tobytes()


def test_reshape_head_layout_merge():
    # [batch, seq, heads, head_size] collapses to [batch, seq, hidden].
    t = Tensor(np.arange(24, dtype=np.float32), shape=(1, 4, 2, 3))
    out = reshape(t, (1, 4, 6))
    assert out.shape == (1, 4, 6)
    assert out.data.tobytes() == t.data.tobytes()


def test_reshape_count_mismatch():
    with pytest.raises(ShapeError):
        reshape(Tensor(np.zeros(6)), (4, 2))


def test_tensor_invariants():
    t = Tensor(np.zeros((2, 0, 3)))
    assert len(t.data) == 0
    assert t.shape == (2, 0, 3)
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0], shape=(3,))


def test_tensor_is_immutable():
    src = np.ones(4, dtype=np.float32)
    t = Tensor(src)
    src[0] = 99.0
    assert t.data[0] == 1.0
    with pytest.raises(ValueError):
        t.array[0] = 5.0
