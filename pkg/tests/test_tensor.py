import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dkern.tensor import (
    as_tensor,
    fully_connected,
    global_avg_pool,
    read_tsr,
    relu,
    tensor_new,
    write_tsr,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)
small_dims = st.tuples(*(st.integers(1, 4),) * 4)


def test_tensor_new_fill_values():
    assert np.all(tensor_new((1, 1, 2, 2), 0.0) == 0)
    t = tensor_new((1, 1, 1, 1), 3.5)
    assert t.shape == (1, 1, 1, 1) and t[0, 0, 0, 0] == 3.5
    assert tensor_new((2, 3, 4, 4), 1.0).sum() == 96.0


def test_tensor_new_zero_dims_and_errors():
    assert tensor_new((0, 3, 2, 2)).size == 0
    with pytest.raises(ValueError):
        tensor_new((1, -1, 2, 2))
    with pytest.raises(ValueError):
        tensor_new((2, 2))
    with pytest.raises(OverflowError):
        tensor_new((2**12, 2**12, 2**12, 2**12))


def test_default_dtype_is_float64():
    assert tensor_new((1, 1, 1, 1)).dtype == np.float64
    assert tensor_new((1, 1, 1, 1), dtype=np.float32).dtype == np.float32


def test_as_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        as_tensor(np.full((1, 1, 2, 2), np.nan))
    with pytest.raises(ValueError):
        as_tensor(np.array([[1.0, np.inf]]).reshape(1, 1, 1, 2))
    with pytest.raises(ValueError):
        as_tensor(np.zeros((2, 2)))


@given(small_dims, finite)
def test_construction_round_trip(dims, value):
    t = tensor_new(dims)
    idx = tuple(d - 1 for d in dims)
    t[idx] = value
    assert t[idx] == value


def test_relu_examples():
    assert relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
    pos = np.array([0.5, 3.0])
    assert np.array_equal(relu(pos), pos)
    assert np.all(relu(-pos) == 0)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=finite))
def test_relu_idempotent(x):
    assert np.array_equal(relu(relu(x)), relu(x))


def test_global_avg_pool_examples():
    plane = np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2)
    assert global_avg_pool(plane)[0, 0, 0, 0] == 4.0
    assert global_avg_pool(np.full((1, 1, 1, 1), 2.25))[0, 0, 0, 0] == 2.25
    with pytest.raises(ValueError):
        global_avg_pool(np.zeros((1, 1, 0, 3)))


@given(small_dims, finite)
def test_global_avg_pool_of_constant(dims, c):
    out = global_avg_pool(np.full(dims, c))
    assert out.shape == dims[:2] + (1, 1)
    assert np.allclose(out, c, rtol=1e-12, atol=1e-12)


def test_fully_connected_examples():
    x = np.array([1.0, 2.0]).reshape(1, 2, 1, 1)
    out = fully_connected(x, np.array([[1.0, 1.0], [1.0, -1.0]]), np.zeros(2))
    assert out.ravel().tolist() == [3.0, -1.0]
    assert np.array_equal(fully_connected(x, np.eye(2), np.zeros(2)), x)
    b = np.array([0.5, -2.0, 7.0])
    out = fully_connected(np.ones((2, 2, 1, 1)), np.zeros((3, 2)), b)
    assert np.array_equal(out.reshape(2, 3), np.stack([b, b]))
    with pytest.raises(ValueError):
        fully_connected(x, np.zeros((3, 4)), np.zeros(3))


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_tsr_round_trip(tmp_path, rng, dtype):
    t = rng.normal(size=(2, 3, 4, 5)).astype(dtype)
    path = tmp_path / "t.tsr"
    write_tsr(path, t)
    back = read_tsr(path)
    assert back.dtype == dtype and back.tobytes() == t.tobytes()
    header, _, payload = path.read_bytes().partition(b"\n")
    assert b'"byte_order": "little"' in header
    assert len(payload) == t.size * t.itemsize


def test_tsr_rejects_truncated_payload(tmp_path):
    path = tmp_path / "bad.tsr"
    write_tsr(path, np.zeros((1, 1, 2, 2)))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        read_tsr(path)
