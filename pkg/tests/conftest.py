import numpy as np
import pytest

from crossproto.numerics import l2_normalize_cols, make_rng


@pytest.fixture
def rng():
    return make_rng(12345)


def random_unit_cols(rng, dim, n):
    return l2_normalize_cols(rng.normal(size=(dim, n)))


def random_distributions(rng, k, b):
    """Random columns on the simplex."""
    q = rng.uniform(0.05, 1.0, size=(k, b))
    return q / q.sum(axis=0, keepdims=True)


@pytest.fixture
def unit_cols():
    return random_unit_cols
