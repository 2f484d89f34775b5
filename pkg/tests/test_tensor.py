from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedlorar.errors import DimensionMismatch, EmptyInput, NonFiniteResult
from fedlorar.tensor import as_vector, axpy, l2_norm_sq, weighted_sum


def v(*xs):
    return as_vector(xs)


@pytest.mark.parametrize(
    "alpha, x, y, expected",
    [
        (0.0, [1, 2], [3, 4], [3, 4]),
        (1.0, [1, 2], [0, 0], [1, 2]),
        (2.0, [1, -1], [1, 1], [3, -1]),
    ],
)
def test_axpy_examples(alpha, x, y, expected):
    assert axpy(alpha, as_vector(x), as_vector(y)).tolist() == expected


def test_axpy_errors():
    with pytest.raises(DimensionMismatch):
        axpy(1.0, v(1, 2), v(1, 2, 3))
    with pytest.raises(NonFiniteResult):
        axpy(1e308, v(1e308), v(1e308))


@pytest.mark.parametrize(
    "weights, vectors, expected",
    [
        ([1.0], [[5, 6]], [5, 6]),
        ([0.5, 0.5], [[2, 0], [0, 2]], [1, 1]),
        ([0.625, 0.375], [[8, 0], [0, 8]], [5, 3]),
    ],
)
def test_weighted_sum_examples(weights, vectors, expected):
    assert weighted_sum(weights, [as_vector(x) for x in vectors]).tolist() == expected


def test_weighted_sum_errors():
    with pytest.raises(EmptyInput):
        weighted_sum([], [])
    with pytest.raises(DimensionMismatch):
        weighted_sum([0.5, 0.5], [v(1, 2), v(1, 2, 3)])
    with pytest.raises(DimensionMismatch):
        weighted_sum([1.0], [v(1), v(2)])


@pytest.mark.parametrize("x, expected", [([0, 0, 0], 0.0), ([3, 4], 25.0), ([1, 1, 1, 1], 4.0)])
def test_l2_norm_sq_examples(x, expected):
    assert l2_norm_sq(as_vector(x)) == expected


def test_vectors_are_read_only():
    x = v(1, 2)
    with pytest.raises(ValueError):
        x[0] = 3.0


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteResult):
        as_vector([1.0, float("nan")])
    with pytest.raises(NonFiniteResult):
        l2_norm_sq(np.array([np.inf]))


finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


@settings(max_examples=300)
@given(
    counts=st.lists(st.integers(1, 1000), min_size=1, max_size=10),
    vec=st.lists(finite.filter(lambda x: x == 0 or abs(x) > 1e-290), min_size=1, max_size=6),
)
def test_convex_combination_of_equal_vectors_is_that_vector(counts, vec):
    # weights k_i / 2^m are exact binary fractions whose exact sum is 1;
    # tiny magnitudes are excluded since subnormal products lose relative precision
    total = sum(counts)
    scale = 2 ** (total.bit_length())
    counts[-1] += scale - total
    weights = [c / scale for c in counts]
    assert sum(Fraction(w) for w in weights) == 1
    x = as_vector(vec)
    out = weighted_sum(weights, [x] * len(weights))
    assert np.all(np.abs(out - x) <= np.spacing(np.abs(x)))


@settings(max_examples=200)
@given(data=st.data(), n=st.integers(1, 8), dim=st.integers(1, 5))
def test_weighted_sum_permutation_invariant(data, n, dim):
    weights = data.draw(st.lists(st.floats(-10, 10), min_size=n, max_size=n))
    vectors = [as_vector(data.draw(st.lists(st.floats(-1e3, 1e3), min_size=dim, max_size=dim))) for _ in range(n)]
    perm = data.draw(st.permutations(range(n)))
    a = weighted_sum(weights, vectors)
    b = weighted_sum([weights[i] for i in perm], [vectors[i] for i in perm])
    assert np.max(np.abs(a - b)) <= 1e-12 * max(1.0, float(np.max(np.abs(a))))
    assert np.array_equal(a, weighted_sum(weights, vectors))


@given(st.lists(finite, min_size=1, max_size=8))
def test_norm_zero_iff_zero_vector(xs):
    x = as_vector(xs)
    assert (l2_norm_sq(x) == 0.0) == bool(np.all(x == 0.0)) or l2_norm_sq(x) < 1e-300
