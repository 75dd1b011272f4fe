"""Kernel-level contracts: products, softmax, normalization, RNG."""

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossproto.numerics import (l2_normalize_cols, make_rng, matmul,
                                 softmax_cols)


def naive_matmul(a, b):
    """Triple-loop oracle, no vectorization."""
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(np.eye(2), a), a)

    def test_hand_product(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[1.0], [1.0]])
        np.testing.assert_array_equal(matmul(a, b), [[3.0], [7.0]])

    def test_matches_triple_loop_oracle(self):
        rng = make_rng(0)
        a = rng.normal(size=(5, 7))
        b = rng.normal(size=(7, 3))
        np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b),
                                   rtol=0, atol=1e-12)

    def test_dimension_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_nonfinite_result_rejected(self):
        big = np.full((2, 2), 1e308)
        with pytest.raises(ValueError, match="non-finite"):
            matmul(big, big)

    def test_associativity(self):
        rng = make_rng(1)
        for _ in range(5):
            a, b, c = (rng.normal(size=(4, 4)) for _ in range(3))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            np.testing.assert_allclose(left, right, rtol=1e-9)


class TestSoftmaxCols:
    def test_equal_entries_give_uniform(self):
        m = np.full((5, 3), 2.7)
        out = softmax_cols(m, 0.1)
        np.testing.assert_allclose(out, 1.0 / 5, atol=1e-15)

    def test_large_gap_saturates(self):
        m = np.array([[10.0], [0.0]])
        out = softmax_cols(m, 0.1)
        assert out[0, 0] > 1 - 1e-12
        assert out[1, 0] < 1e-12

    def test_columns_sum_to_one(self):
        rng = make_rng(2)
        out = softmax_cols(rng.normal(size=(9, 6)), 0.3)
        np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-12)

    def test_matches_extended_precision_oracle(self):
        rng = make_rng(3)
        m = rng.normal(size=(4, 3))
        out = softmax_cols(m, 0.1)
        with mpmath.workdps(50):
            for j in range(3):
                exps = [mpmath.exp(mpmath.mpf(m[i, j]) / mpmath.mpf("0.1"))
                        for i in range(4)]
                total = mpmath.fsum(exps)
                for i in range(4):
                    assert abs(out[i, j] - float(exps[i] / total)) < 1e-12

    def test_rejects_nonpositive_temperature(self):
        with pytest.raises(ValueError, match="temperature"):
            softmax_cols(np.ones((2, 2)), 0.0)
        with pytest.raises(ValueError, match="temperature"):
            softmax_cols(np.ones((2, 2)), -1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
    def test_shift_invariance(self, seed, shift):
        m = make_rng(seed).normal(size=(6, 4))
        base = softmax_cols(m, 0.5)
        shifted = softmax_cols(m + shift, 0.5)
        np.testing.assert_allclose(base, shifted, atol=1e-12)


class TestL2NormalizeCols:
    def test_three_four_five(self):
        out = l2_normalize_cols(np.array([[3.0], [4.0]]))
        np.testing.assert_allclose(out, [[0.6], [0.8]], atol=1e-15)

    def test_unit_columns_unchanged(self):
        rng = make_rng(4)
        m = l2_normalize_cols(rng.normal(size=(8, 5)))
        np.testing.assert_allclose(l2_normalize_cols(m), m, atol=1e-12)

    def test_norms_match_scalar_loop_oracle(self):
        rng = make_rng(5)
        m = rng.normal(size=(7, 9)) * 10
        out = l2_normalize_cols(m)
        for j in range(9):
            norm = np.sqrt(sum(out[i, j] ** 2 for i in range(7)))
            assert abs(norm - 1.0) < 1e-12

    def test_zero_column_rejected(self):
        m = np.array([[1.0, 0.0], [1.0, 0.0]])
        with pytest.raises(ValueError, match="zero column 1"):
            l2_normalize_cols(m)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_idempotent(self, seed):
        m = make_rng(seed).normal(size=(5, 6)) + 0.01
        once = l2_normalize_cols(m)
        np.testing.assert_allclose(l2_normalize_cols(once), once, atol=1e-12)


class TestRng:
    def test_same_seed_same_stream(self):
        a = make_rng(99).normal(size=10)
        b = make_rng(99).normal(size=10)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        a = make_rng(1).normal(size=10)
        b = make_rng(2).normal(size=10)
        assert not np.array_equal(a, b)
