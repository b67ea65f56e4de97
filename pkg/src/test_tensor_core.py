"""
Tests for the dense tensor primitives.
"""

import itertools
import math

import numpy as np
import pytest

from src.errors import NonFiniteError, ShapeMismatchError
from src.tensor_core import (
    FeatureTensor,
    Matrix2D,
    Permutation,
    channel_linear,
    compose,
    count_ops,
    fold,
    identity_permutation,
    inverse_permutation,
    matmul,
    op_phase,
    permute_axes,
    row_softmax,
    transpose,
    unfold,
)


def _random(shape, seed=0):
    return FeatureTensor(np.random.default_rng(seed).standard_normal(shape))


class TestFeatureTensor:
    def test_buffer_is_read_only_copy(self):
        source = np.arange(6.0).reshape(2, 3)
        x = FeatureTensor(source)
        source[0, 0] = 99.0
        assert x.data[0, 0] == 0.0
        with pytest.raises(ValueError):
            x.data[0, 0] = 1.0

    def test_read_only_view_of_writable_array_is_copied(self):
        base = np.arange(6.0)
        view = base.reshape(2, 3)
        view.flags.writeable = False
        x = FeatureTensor(view)
        base[0] = 99.0
        assert x.data[0, 0] == 0.0

    def test_owned_read_only_buffer_is_adopted(self):
        owned = np.arange(6.0).reshape(2, 3).copy()
        owned.flags.writeable = False
        assert FeatureTensor(owned).data is owned

    def test_row_major_linear_index(self):
        x = FeatureTensor.from_buffer((2, 3, 4), np.arange(24.0))
        assert x.linear_index((1, 2, 3)) == 1 * 12 + 2 * 4 + 3
        assert x.flat()[x.linear_index((1, 0, 2))] == x.data[1, 0, 2]

    def test_rejects_rank_one_and_mismatched_buffer(self):
        with pytest.raises(ShapeMismatchError):
            FeatureTensor(np.zeros(4))
        with pytest.raises(ShapeMismatchError):
            FeatureTensor.from_buffer((2, 3), np.zeros(5))


class TestPermutation:
    def test_rejects_non_bijection(self):
        with pytest.raises(ShapeMismatchError):
            Permutation((0, 0, 1))

    @pytest.mark.parametrize("order", list(itertools.permutations(range(4))))
    def test_compose_with_inverse_is_identity(self, order):
        p = Permutation(order)
        assert compose(p, inverse_permutation(p)) == identity_permutation(4)
        assert compose(inverse_permutation(p), p) == identity_permutation(4)

    def test_compose_applies_left_first(self):
        x = _random((2, 3, 4))
        p, q = Permutation((1, 0, 2)), Permutation((2, 0, 1))
        np.testing.assert_array_equal(
            permute_axes(permute_axes(x, p), q).data, permute_axes(x, compose(p, q)).data
        )

    def test_leading(self):
        assert Permutation.leading(3, 4).order == (3, 0, 1, 2)
        assert Permutation.leading(0, 4).mode == 0


class TestPermuteAxes:
    def test_shape(self):
        assert permute_axes(_random((2, 3, 4, 5)), Permutation((1, 0, 2, 3))).shape == (3, 2, 4, 5)

    def test_identity_unchanged(self):
        x = _random((2, 3, 4, 5))
        np.testing.assert_array_equal(permute_axes(x, identity_permutation(4)).data, x.data)

    def test_matrix_transpose(self):
        x = FeatureTensor(np.array([[1.0, 2, 3], [4, 5, 6]]))
        np.testing.assert_array_equal(
            permute_axes(x, Permutation((1, 0))).data, [[1, 4], [2, 5], [3, 6]]
        )

    def test_inverse_restores_bitwise(self):
        x = _random((2, 3, 4, 5), seed=3)
        p = Permutation((2, 0, 3, 1))
        np.testing.assert_array_equal(permute_axes(permute_axes(x, p), p.inverse()).data, x.data)

    def test_rank_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            permute_axes(_random((2, 3)), Permutation((0, 1, 2)))


class TestUnfoldFold:
    def test_unfold_shapes(self):
        x = _random((2, 3, 4, 5))
        assert unfold(x, Permutation((1, 0, 2, 3))).shape == (3, 40)
        assert unfold(x, Permutation((3, 0, 1, 2))).shape == (5, 24)

    def test_identity_unfold_is_same_buffer(self):
        x = _random((2, 3))
        np.testing.assert_array_equal(unfold(x, Permutation((0, 1))).data, x.data)

    def test_fold_restores_shape(self):
        m = Matrix2D(np.random.default_rng(1).standard_normal((3, 40)))
        assert fold(m, Permutation((1, 0, 2, 3)), (2, 3, 4, 5)).shape == (2, 3, 4, 5)

    @pytest.mark.parametrize("shape", [(2, 3), (2, 3, 4), (2, 3, 2, 3), (2, 1, 3, 2, 2)])
    def test_round_trip_every_permutation(self, shape):
        x = _random(shape, seed=len(shape))
        for order in itertools.permutations(range(len(shape))):
            p = Permutation(order)
            np.testing.assert_array_equal(fold(unfold(x, p), p, shape).data, x.data)

    def test_round_trip_channel_unfolding_many_tensors(self):
        rng = np.random.default_rng(2024)
        p = Permutation((3, 0, 1, 2))
        for _ in range(100):
            x = FeatureTensor(rng.standard_normal((2, 2, 2, 2)))
            np.testing.assert_array_equal(fold(unfold(x, p), p, x.shape).data, x.data)

    def test_fold_rejects_bad_shapes(self):
        m = Matrix2D(np.zeros((3, 40)))
        with pytest.raises(ShapeMismatchError):
            fold(m, Permutation((1, 0, 2, 3)), (2, 3, 4, 6))
        with pytest.raises(ShapeMismatchError):
            fold(m, Permutation((0, 1, 2, 3)), (2, 3, 4, 5))
        with pytest.raises(ShapeMismatchError):
            fold(m, Permutation((1, 0, 2)), (2, 3, 4, 5))


class TestMatmul:
    def test_identity(self):
        b = Matrix2D(np.random.default_rng(0).standard_normal((3, 4)))
        np.testing.assert_array_equal(matmul(Matrix2D.identity(3), b).data, b.data)

    def test_hand_checked(self):
        out = matmul(Matrix2D([[1.0, 2.0], [3.0, 4.0]]), Matrix2D([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(7)
        a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
        expected = np.zeros((7, 3))
        for i in range(7):
            for j in range(3):
                for k in range(5):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(matmul(Matrix2D(a), Matrix2D(b)).data, expected, rtol=0, atol=1e-12)

    def test_inner_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            matmul(Matrix2D(np.zeros((2, 3))), Matrix2D(np.zeros((2, 3))))

    def test_reproducible(self):
        rng = np.random.default_rng(11)
        a, b = Matrix2D(rng.standard_normal((16, 300))), Matrix2D(rng.standard_normal((300, 9)))
        np.testing.assert_array_equal(matmul(a, b).data, matmul(a, b).data)

    def test_transpose(self):
        m = Matrix2D(np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(transpose(m).data, np.arange(6.0).reshape(2, 3).T)


class TestRowSoftmax:
    def test_constant_row_is_uniform(self):
        out = row_softmax(Matrix2D(np.full((1, 5), 3.7)))
        np.testing.assert_allclose(out.data, 0.2, rtol=0, atol=1e-15)

    def test_analytic(self):
        out = row_softmax(Matrix2D([[0.0, math.log(3.0)]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], rtol=0, atol=1e-15)

    def test_rows_sum_to_one(self):
        out = row_softmax(Matrix2D(np.random.default_rng(5).standard_normal((4, 6)) * 5))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        assert np.all((out.data > 0) & (out.data < 1))

    def test_large_logits_do_not_overflow(self):
        out = row_softmax(Matrix2D([[1000.0, 1000.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite(self, bad):
        with pytest.raises(NonFiniteError):
            row_softmax(Matrix2D([[0.0, bad]]))


class TestChannelLinear:
    def test_identity_and_zero(self):
        x = _random((2, 3, 4))
        np.testing.assert_array_equal(channel_linear(x, Matrix2D.identity(4)).data, x.data)
        np.testing.assert_array_equal(channel_linear(x, Matrix2D(np.zeros((4, 4)))).data, 0.0)

    def test_against_per_position_oracle(self):
        rng = np.random.default_rng(9)
        x = FeatureTensor(rng.standard_normal((2, 3, 4, 5)))
        w = rng.standard_normal((5, 5))
        b = rng.standard_normal(5)
        expected = np.empty(x.shape)
        for index in np.ndindex(*x.shape[:-1]):
            expected[index] = w @ x.data[index] + b
        np.testing.assert_allclose(channel_linear(x, Matrix2D(w), b).data, expected, rtol=0, atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(10)
        x, y = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))
        w = Matrix2D(rng.standard_normal((3, 4)))
        lhs = channel_linear(FeatureTensor(2.5 * x - 0.5 * y), w).data
        rhs = 2.5 * channel_linear(FeatureTensor(x), w).data - 0.5 * channel_linear(FeatureTensor(y), w).data
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            channel_linear(_random((2, 3)), Matrix2D(np.zeros((3, 4))))
        with pytest.raises(ShapeMismatchError):
            channel_linear(_random((2, 3)), Matrix2D(np.zeros((3, 3))), np.zeros(2))


class TestOpCounting:
    def test_counts_two_flops_per_mac_by_phase(self):
        a, b = Matrix2D(np.ones((2, 3))), Matrix2D(np.ones((3, 4)))
        with count_ops() as counter:
            matmul(a, b)
            with op_phase("aggregate"):
                matmul(a, b)
                matmul(a, b)
        assert counter["matmul"] == 48
        assert counter["aggregate"] == 96
        assert counter.calls["aggregate"] == 2
        assert counter.total == 144

    def test_nothing_recorded_outside_block(self):
        with count_ops() as counter:
            pass
        matmul(Matrix2D(np.ones((2, 2))), Matrix2D(np.ones((2, 2))))
        assert counter.total == 0
