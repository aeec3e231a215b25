import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dkern.conv import ConvSpec, KernelScope, conv2d_backward, conv2d_relu, conv2d_rigid
from dkern.gradcheck import gradcheck_op
from dkern.tensor import relu

seeds = st.integers(0, 2**31 - 1)


def test_all_ones_valid():
    spec = ConvSpec(3, 1, 1)
    out = conv2d_rigid(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), spec)
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 9.0


def test_delta_kernel_same_padding_is_identity(rng):
    x = rng.normal(size=(2, 1, 6, 7))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    assert np.array_equal(conv2d_rigid(x, k, ConvSpec(3, 1, 1, padding=1)), x)


def test_even_kernel_hand_example():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    k = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 1, 2, 2)
    assert conv2d_rigid(x, k, ConvSpec(2, 1, 1))[0, 0, 0, 0] == 5.0


def test_relu_examples():
    x = np.array([[1.0, -2.0], [3.0, -4.0]]).reshape(1, 1, 2, 2)
    assert conv2d_relu(x, np.ones((1, 1, 2, 2)), ConvSpec(2, 1, 1))[0, 0, 0, 0] == 0.0
    neg = -np.ones((1, 1, 4, 4))
    assert np.all(conv2d_relu(neg, np.ones((1, 1, 3, 3)), ConvSpec(3, 1, 1)) == 0)
    pos = np.abs(np.random.default_rng(0).normal(size=(1, 1, 5, 5)))
    w = np.abs(np.random.default_rng(1).normal(size=(1, 1, 3, 3)))
    spec = ConvSpec(3, 1, 1)
    assert np.array_equal(conv2d_relu(pos, w, spec), conv2d_rigid(pos, w, spec))


def test_shape_errors():
    with pytest.raises(ValueError):
        conv2d_rigid(np.zeros((1, 2, 5, 5)), np.zeros((1, 1, 3, 3)), ConvSpec(3, 1, 1))
    with pytest.raises(ValueError):
        conv2d_rigid(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), ConvSpec(3, 1, 1))
    with pytest.raises(ValueError):
        ConvSpec(3, 2, 3, depthwise=True)
    with pytest.raises(ValueError):
        conv2d_backward(np.zeros((1, 1, 5, 5)), np.zeros((1, 1, 3, 3)), ConvSpec(3, 1, 1), np.zeros((1, 1, 5, 5)))


def test_output_size_formula():
    spec = ConvSpec(3, 1, 1, stride=2, padding=1)
    assert spec.output_size(7, 8) == (4, 4)
    assert conv2d_rigid(np.zeros((1, 1, 7, 8)), np.zeros((1, 1, 3, 3)), spec).shape == (1, 1, 4, 4)


def test_scope_base_lattice_symmetric():
    scope = KernelScope(np.zeros((1, 1, 4, 4)), 3)
    lat = scope.base_lattice
    assert lat.shape == (9, 2)
    assert np.allclose(lat + lat[::-1], 0)
    assert np.all(np.abs(lat) <= 1.5)


@given(seeds, st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    spec = ConvSpec(3, 2, 3, padding=1)
    w = rng.normal(size=(3, 2, 3, 3))
    x1, x2 = rng.normal(size=(2, 1, 2, 5, 5))
    lhs = conv2d_rigid(a * x1 + b * x2, w, spec)
    rhs = a * conv2d_rigid(x1, w, spec) + b * conv2d_rigid(x2, w, spec)
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-10)


@given(seeds)
def test_shift_equivariance(seed):
    rng = np.random.default_rng(seed)
    spec = ConvSpec(3, 1, 2)
    w = rng.normal(size=(2, 1, 3, 3))
    x = rng.normal(size=(1, 1, 8, 8))
    shifted = np.roll(x, 1, axis=3)
    a, b = conv2d_rigid(x, w, spec), conv2d_rigid(shifted, w, spec)
    assert np.array_equal(a[..., :-1], b[..., 1:])


@given(seeds)
def test_relu_composition(seed):
    rng = np.random.default_rng(seed)
    spec = ConvSpec(3, 2, 2, padding=1)
    x, w = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(2, 2, 3, 3))
    assert np.array_equal(conv2d_relu(x, w, spec), relu(conv2d_rigid(x, w, spec)))


@given(seeds, st.integers(1, 4), st.integers(1, 2))
def test_depthwise_equals_block_diagonal_dense(seed, c, stride):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, c, 6, 6))
    wd = rng.normal(size=(c, 1, 3, 3))
    dense = np.zeros((c, c, 3, 3))
    for i in range(c):
        dense[i, i] = wd[i, 0]
    a = conv2d_rigid(x, wd, ConvSpec(3, c, c, stride, 1, depthwise=True))
    b = conv2d_rigid(x, dense, ConvSpec(3, c, c, stride, 1))
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_backward_zero_upstream(rng):
    spec = ConvSpec(3, 2, 3, padding=1)
    x, w = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3))
    gx, gw = conv2d_backward(x, w, spec, np.zeros((1, 3, 4, 4)))
    assert not gx.any() and not gw.any()


def test_backward_scalar_chain_rule():
    spec = ConvSpec(1, 1, 1)
    gx, gw = conv2d_backward(np.full((1, 1, 1, 1), 3.0), np.full((1, 1, 1, 1), 2.0), spec, np.full((1, 1, 1, 1), 5.0))
    assert gx.item() == 10.0 and gw.item() == 15.0


@pytest.mark.parametrize("op", ["conv_weights", "conv_input"])
@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(op, seed):
    report = gradcheck_op(op, seed)
    assert report.passed, report.format()
