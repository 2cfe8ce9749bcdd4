import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from angiokit.errors import ValidationError
from angiokit.numerics import (
    Rng,
    cosine_similarity,
    dense_matrix,
    finite_diff_check,
    softmax,
)


class TestSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])

    def test_log_two_closed_form(self):
        out = softmax(np.array([np.log(2.0), 0.0]))
        np.testing.assert_allclose(out, [2.0 / 3.0, 1.0 / 3.0], atol=1e-12)

    def test_single_unmasked_entry(self):
        out = softmax(np.array([5.0, 100.0]), mask=np.array([True, False]))
        assert out[0] == 1.0 and out[1] == 0.0

    def test_sums_to_one_large_values(self):
        out = softmax(np.array([1e300, 1e300, 0.0]) / 1e297)
        assert abs(out.sum() - 1.0) <= 1e-12

    def test_empty_vector_rejected(self):
        with pytest.raises(ValidationError, match="degenerate softmax"):
            softmax(np.array([]))

    def test_all_masked_rejected(self):
        with pytest.raises(ValidationError, match="degenerate softmax"):
            softmax(np.array([1.0, 2.0]), mask=np.array([False, False]))

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            softmax(np.array([np.nan, 1.0]))

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.integers(0, 2**32))
    @settings(max_examples=100, deadline=None)
    def test_permutation_equivariance(self, values, seed):
        v = np.asarray(values)
        perm = Rng(seed).permutation(len(values))
        lhs = softmax(v[perm])
        rhs = softmax(v)[perm]
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


class TestCosine:
    def test_identical(self):
        assert cosine_similarity(np.array([1.0, 1.0]), np.array([1.0, 1.0])) == 1.0

    def test_orthogonal(self):
        assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_hand_value(self):
        # dot = 4, norms sqrt(5) * sqrt(5)
        assert abs(cosine_similarity(np.array([1.0, 2.0]), np.array([2.0, 1.0])) - 0.8) < 1e-15

    def test_zero_vector_is_error(self):
        with pytest.raises(ValidationError, match="zero vector"):
            cosine_similarity(np.zeros(3), np.ones(3))

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            cosine_similarity(np.ones(3), np.ones(4))

    @given(
        st.lists(st.floats(-10, 10), min_size=2, max_size=8),
        st.floats(0.01, 100.0),
    )
    @settings(max_examples=100, deadline=None)
    def test_positive_scaling(self, values, c):
        a = np.asarray(values)
        if np.linalg.norm(a) == 0:
            return
        assert cosine_similarity(a, c * a) == pytest.approx(1.0, abs=1e-12)
        assert cosine_similarity(a, -c * a) == pytest.approx(-1.0, abs=1e-12)


class TestFiniteDiff:
    def test_correct_quadratic_gradient(self):
        err = finite_diff_check(lambda w: (w[0] ** 2, np.array([2 * w[0]])), np.array([3.0]))
        assert err < 1e-8

    def test_wrong_gradient_reports_relative_error(self):
        err = finite_diff_check(lambda w: (w[0] ** 2, np.array([5.0])), np.array([3.0]))
        assert abs(err - 1.0 / 6.0) < 1e-6

    def test_eps_range_enforced(self):
        with pytest.raises(ValidationError):
            finite_diff_check(lambda w: (w[0], np.ones(1)), np.array([1.0]), eps=1e-2)

    def test_non_finite_objective(self):
        with pytest.raises(ValidationError, match="non-finite objective"):
            finite_diff_check(
                lambda w: (float("nan"), np.ones(1)), np.array([1.0])
            )


class TestRng:
    def test_equal_seeds_bit_identical_streams(self):
        a = Rng(123456)
        b = Rng(123456)
        assert np.array_equal(a.normal(size=1000), b.normal(size=1000))
        assert np.array_equal(a.integers(0, 1 << 30, size=100), b.integers(0, 1 << 30, size=100))

    def test_derive_independent_of_consumption_order(self):
        root = Rng(9)
        child_first = root.derive("a", 1).normal(size=5)
        root.normal(size=100)  # consuming the parent must not move children
        child_again = Rng(9).derive("a", 1).normal(size=5)
        assert np.array_equal(child_first, child_again)

    def test_distinct_tags_distinct_streams(self):
        a = Rng(9).derive("a").normal(size=8)
        b = Rng(9).derive("b").normal(size=8)
        assert not np.array_equal(a, b)


class TestDenseMatrix:
    def test_roundtrip(self):
        m = dense_matrix(2, 3, [1, 2, 3, 4, 5, 6])
        assert m.shape == (2, 3) and m.dtype == np.float64

    def test_size_mismatch(self):
        with pytest.raises(ValidationError):
            dense_matrix(2, 2, [1.0, 2.0, 3.0])

    def test_nan_rejected(self):
        with pytest.raises(ValidationError):
            dense_matrix(1, 2, [1.0, float("nan")])
