import numpy as np
import pytest
from hypothesis import given, strategies as st

from stochasticnet.tensor import DTYPE, check_shape, tensor_create, tensor_index


def test_create_constant_fill():
    t = tensor_create([2, 2], 0)
    assert t.shape == (2, 2)
    assert t.dtype == DTYPE
    assert np.array_equal(t, np.zeros((2, 2)))


def test_create_from_values():
    t = tensor_create([3], [1, 2, 3])
    assert np.array_equal(t, [1, 2, 3])


def test_create_length_mismatch():
    with pytest.raises(ValueError, match="3 entries"):
        tensor_create([2], [1, 2, 3])


def test_create_rejects_non_finite():
    with pytest.raises(ValueError, match="finite"):
        tensor_create([2], [1.0, float("nan")])
    with pytest.raises(ValueError, match="finite"):
        tensor_create([1], float("inf"))


def test_bad_shapes():
    for bad in ([], [0], [2, -1]):
        with pytest.raises(ValueError):
            check_shape(bad)


def test_index_row_major():
    t = tensor_create([2, 2], [1, 2, 3, 4])
    assert tensor_index(t, (1, 0)) == 3
    assert tensor_index(t, (0, 1)) == 2


def test_index_out_of_bounds():
    t = tensor_create([2, 2], [1, 2, 3, 4])
    with pytest.raises(IndexError):
        tensor_index(t, (2, 0))
    with pytest.raises(IndexError):
        tensor_index(t, (-1, 0))
    with pytest.raises(IndexError):
        tensor_index(t, (0,))


@given(
    dims=st.lists(st.integers(1, 4), min_size=1, max_size=3),
    seed=st.integers(0, 1000),
)
def test_flatten_reshape_roundtrip(dims, seed):
    volume = int(np.prod(dims))
    values = np.random.default_rng(seed).random(volume).astype(DTYPE)
    t = tensor_create(dims, values)
    assert np.array_equal(t.ravel(), values)  # row-major layout observable
    assert np.array_equal(t.ravel().reshape(t.shape), t)


def test_create_copies_input():
    values = np.ones(4, dtype=DTYPE)
    t = tensor_create([4], values)
    values[0] = 9.0
    assert t[0] == 1.0
