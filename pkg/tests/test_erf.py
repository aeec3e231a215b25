import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.signal import convolve2d

from dkern import erf, sampler
from dkern.conv import KernelScope

seeds = st.integers(0, 2**31 - 1)
J = (7, 7)
SHAPE = (15, 15)


def _stack(rng, n, k=3):
    return erf.LinearStack.from_kernels(rng.normal(size=(n, k, k)))


def _backprop(stack, relu=False, x=None, j=J):
    net = erf.stack_to_graph(stack, relu=relu)
    if x is None:
        x = np.random.default_rng(0).normal(size=(1, 1) + SHAPE)
    return erf.erf_backprop(net, x, j)


def _brute_force(stack, i, j, pin=None):
    """Literal sum over kernel-position tuples, optionally restricted to one tap of one layer."""
    total = 0.0
    kernels = [layer.tap_values() for layer in stack.layers]
    ranges = [[(a - k.shape[0] // 2, b - k.shape[1] // 2) for a in range(k.shape[0]) for b in range(k.shape[1])]
              for k in kernels]
    for combo in itertools.product(*ranges):
        if pin is not None and combo[pin[0] - 1] != pin[1]:
            continue
        if (j[0] + sum(c[0] for c in combo), j[1] + sum(c[1] for c in combo)) != tuple(i):
            continue
        prod = 1.0
        for kern, (dy, dx) in zip(kernels, combo):
            c = kern.shape[0] // 2
            prod *= kern[dy + c, dx + c]
        total += prod
    return total


def test_single_layer_backprop_is_the_kernel(rng):
    w = rng.normal(size=(3, 3))
    m = _backprop(erf.LinearStack.from_kernels([w]))
    expected = np.zeros(SHAPE)
    expected[6:9, 6:9] = w
    assert np.array_equal(m.values, expected)
    assert m.network_depth == 1 and m.output_coord == J


def test_two_layers_give_full_kernel_convolution(rng):
    w1, w2 = rng.normal(size=(2, 3, 3))
    m = _backprop(erf.LinearStack.from_kernels([w1, w2]))
    expected = np.zeros(SHAPE)
    expected[5:10, 5:10] = convolve2d(w1, w2, mode="full")
    assert np.allclose(m.values, expected, rtol=0, atol=1e-12)


def test_positive_relu_net_equals_linear(rng):
    stack = erf.LinearStack.from_kernels(np.abs(rng.normal(size=(3, 3, 3))))
    x = np.abs(rng.normal(size=(1, 1) + SHAPE)) + 0.1
    relu_map = _backprop(stack, relu=True, x=x)
    linear = _backprop(stack, x=x)
    assert np.allclose(relu_map.values, linear.values, rtol=0, atol=1e-12)
    assert all(mask.all() for mask in relu_map.gating.masks)
    assert [mask.shape for mask in relu_map.gating.masks] == [(1,) + SHAPE] * 3


def test_enumerate_examples(rng):
    w = rng.normal(size=(3, 3))
    stack = erf.LinearStack.from_kernels([w])
    assert erf.erf_enumerate(stack, (6, 8), J) == w[0, 2]
    deep = _stack(rng, 2)
    assert erf.erf_enumerate(deep, (7, 10), J) == 0.0
    assert erf.erf_enumerate(deep, (2, 7), J) == 0.0


@pytest.mark.parametrize("n", [1, 2, 3])
def test_enumerate_matches_backprop(rng, n):
    stack = _stack(rng, n)
    field = erf.erf_enumerate_map(stack, J, SHAPE, method="paths")
    assert np.abs(field - _backprop(stack).values).max() <= 1e-10
    for i in [(7, 7), (5, 9), (7 - n, 7 + n)]:
        assert abs(erf.erf_enumerate(stack, i, J) - field[i]) <= 1e-12


def test_enumerate_matches_literal_tuples(rng):
    stack = _stack(rng, 2)
    for i in [(7, 7), (5, 6), (9, 9)]:
        assert abs(erf.erf_enumerate(stack, i, J) - _brute_force(stack, i, J)) <= 1e-12


@given(seeds, st.integers(1, 4), st.sampled_from([1, 3, 5]))
def test_dp_matches_paths(seed, n, k):
    stack = _stack(np.random.default_rng(seed), n, k)
    a = erf.displacement_field(stack, "paths")
    b = erf.displacement_field(stack, "dp")
    assert np.allclose(a, b, rtol=0, atol=1e-10)


def test_tractability_guard(rng):
    stack = _stack(rng, 9)
    assert stack.path_count() > erf.PATH_GUARD
    with pytest.raises(erf.IntractableError):
        erf.erf_enumerate(stack, J, J)
    deeper = _stack(rng, 10)  # pinning drops one layer from the count
    with pytest.raises(erf.IntractableError):
        erf.erf_enumerate_pinned(deeper, J, J, 1, (0, 0))
    field = erf.displacement_field(stack, "auto")
    assert field.shape == (19, 19)


def test_pinned_examples(rng):
    w = rng.normal(size=(3, 3))
    stack = erf.LinearStack.from_kernels([w])
    assert erf.erf_enumerate_pinned(stack, J, J, 1, (1, -1)) == w[2, 0]
    assert erf.erf_enumerate_pinned(stack, (7, 8), J, 1, (1, -1)) == 0.0
    w2 = rng.normal(size=(3, 3))
    w2[0, 0] = 0.0
    stack = erf.LinearStack.from_kernels([rng.normal(size=(3, 3)), w2])
    assert erf.erf_enumerate_pinned(stack, (6, 6), J, 2, (-1, -1)) == 0.0
    with pytest.raises(ValueError):
        erf.erf_enumerate_pinned(stack, J, J, 3, (0, 0))


def test_pinned_matches_path_filter(rng):
    stack = _stack(rng, 2)
    for m in (1, 2):
        for tap in [(0, 0), (-1, 1), (1, 0)]:
            for i in [(7, 7), (6, 8), (8, 9)]:
                # pinning keeps layer m's displacement out of the coordinate sum
                shifted = (J[0] + tap[0], J[1] + tap[1])
                pinned = erf.erf_enumerate_pinned(stack, i, shifted, m, tap)
                assert abs(pinned - _brute_force(stack, i, J, pin=(m, tap))) <= 1e-12


@pytest.mark.parametrize("n,m", [(1, 1), (2, 1), (2, 2), (3, 1), (3, 2), (3, 3)])
def test_decomposition_identity(rng, n, m):
    stack = _stack(rng, n)
    for i in [(7, 7), (6, 9), (8, 5)]:
        lhs, rhs, diff = erf.erf_decompose_check(stack, i, J, m)
        assert diff <= 1e-12 and lhs == erf.erf_enumerate(stack, i, J)
        if n == 1:
            assert diff == 0.0


def _dk_stack(rng, n, offsets=True, scope_size=4):
    layers = []
    for _ in range(n):
        off = rng.uniform(-0.6, 0.6, size=(9, 2)) if offsets else np.zeros((9, 2))
        layers.append(erf.StackLayer(scope=rng.normal(size=(scope_size, scope_size)), kernel_size=3, kernel_offsets=off))
    return erf.LinearStack(layers)


def test_dk_zero_offsets_equals_enumerate(rng):
    stack = _dk_stack(rng, 2, offsets=False, scope_size=3)
    rigid = erf.LinearStack.from_kernels([l.scope for l in stack.layers])
    for i in [(7, 7), (5, 8)]:
        assert erf.erf_dk(stack, i, J) == pytest.approx(erf.erf_enumerate(rigid, i, J), abs=1e-14)


def test_dk_single_layer_is_resampled_kernel(rng):
    stack = _dk_stack(rng, 1)
    layer = stack.layers[0]
    kern = sampler.resample_kernel(KernelScope(layer.scope[None, None], 3), layer.kernel_offsets)[0, 0]
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            assert erf.erf_dk(stack, (J[0] + dy, J[1] + dx), J) == pytest.approx(kern[dy + 1, dx + 1], abs=1e-15)


@pytest.mark.parametrize("m", [1, 2])
def test_dk_matches_backprop_through_deformed_graph(rng, m):
    stack = _dk_stack(rng, 2)
    ref = _backprop(stack).values
    got = np.array([[erf.erf_dk(stack, (a, b), J, m) for b in range(15)] for a in range(15)])
    assert np.abs(got - ref).max() <= 1e-10


def _dc_stack(rng, n, shifts):
    return erf.LinearStack([erf.StackLayer(kernel=rng.normal(size=(3, 3)), data_offsets=s) for s in shifts[:n]])


def test_dc_zero_offsets_equals_enumerate(rng):
    stack = _dc_stack(rng, 2, [np.zeros((9, 2))] * 2)
    rigid = erf.LinearStack.from_kernels([l.kernel for l in stack.layers])
    for i in [(7, 7), (6, 9)]:
        assert erf.erf_dc(stack, i, J) == pytest.approx(erf.erf_enumerate(rigid, i, J), abs=1e-14)


def test_dc_integer_shift_translates(rng):
    shifts = [np.tile([1.0, 0.0], (9, 1)), np.tile([0.0, -2.0], (9, 1))]  # (dx, dy) per tap
    stack = _dc_stack(rng, 2, shifts)
    rigid = erf.LinearStack.from_kernels([l.kernel for l in stack.layers])
    for i in [(5, 8), (7, 7), (4, 9)]:
        translated = (i[0] + 2, i[1] - 1)
        assert erf.erf_dc(stack, i, J) == pytest.approx(erf.erf_enumerate(rigid, translated, J), abs=1e-14)


@pytest.mark.parametrize("m", [1, 2])
def test_dc_fractional_matches_backprop(rng, m):
    stack = _dc_stack(rng, 2, [rng.uniform(-1.5, 1.5, size=(9, 2)) for _ in range(2)])
    ref = _backprop(stack).values
    got = np.array([[erf.erf_dc(stack, (a, b), J, m) for b in range(15)] for a in range(15)])
    assert np.abs(got - ref).max() <= 1e-10


def test_dcdk_matches_backprop(rng):
    layers = [
        erf.StackLayer(scope=rng.normal(size=(4, 4)), kernel_size=3,
                       kernel_offsets=rng.uniform(-0.5, 0.5, size=(9, 2)),
                       data_offsets=rng.uniform(-1, 1, size=(9, 2)))
        for _ in range(2)
    ]
    stack = erf.LinearStack(layers)
    ref = _backprop(stack).values
    got = np.array([[erf.erf_dcdk(stack, (a, b), J) for b in range(15)] for a in range(15)])
    assert np.abs(got - ref).max() <= 1e-10
    with pytest.raises(ValueError):
        erf.erf_dk(stack, J, J)
    with pytest.raises(ValueError):
        erf.erf_dc(stack, J, J)


@given(seeds, st.integers(1, 3), st.sampled_from([1, 3, 5]))
def test_support_within_theoretical_box(seed, n, k):
    rng = np.random.default_rng(seed)
    stack = _stack(rng, n, k)
    m = _backprop(stack, relu=bool(seed % 2), x=rng.normal(size=(1, 1, 21, 21)), j=(10, 10))
    r = n * (k // 2)
    ys, xs = np.nonzero(m.values)
    assert np.all(np.abs(ys - 10) <= r) and np.all(np.abs(xs - 10) <= r)
    assert stack.rf_half_width() == r


@given(seeds)
def test_relu_support_subset_of_linear(seed):
    rng = np.random.default_rng(seed)
    stack = _stack(rng, 2)
    x = rng.normal(size=(1, 1) + SHAPE)
    relu_support = _backprop(stack, relu=True, x=x).values != 0
    linear_support = _backprop(stack, x=x).values != 0
    assert not np.any(relu_support & ~linear_support)


def porous_instance():
    """Two ReLU layers where one dark pixel switches off the layer-1 unit that is
    the only route from the corner pixel j + (2, 2) to the output at j."""
    rng = np.random.default_rng(5)
    w1 = rng.normal(size=(3, 3))
    w1[1, 1] = 1.0
    w2 = np.abs(rng.normal(size=(3, 3))) + 0.1
    w2[0, 1] = -0.5
    x = np.ones((1, 1) + SHAPE)
    x[0, 0, J[0] + 1, J[1] + 1] = -100.0
    return erf.LinearStack.from_kernels([w1, w2]), x


def test_relu_erf_is_porous():
    stack, x = porous_instance()
    relu_map = _backprop(stack, relu=True, x=x)
    linear = _backprop(stack, x=x)
    assert relu_map.gating.masks[-1][0, J[0], J[1]]  # the output unit itself fires
    assert not relu_map.gating.masks[0][0, J[0] + 1, J[1] + 1]
    corner = (J[0] + 2, J[1] + 2)
    assert linear.values[corner] != 0 and relu_map.values[corner] == 0
    relu_support, lin_support = relu_map.values != 0, linear.values != 0
    assert not np.any(relu_support & ~lin_support)
    assert relu_support.sum() < lin_support.sum()


def test_backprop_out_of_bounds(rng):
    net = erf.stack_to_graph(_stack(rng, 1))
    with pytest.raises(IndexError):
        erf.erf_backprop(net, np.zeros((1, 1, 5, 5)), (5, 0))


def test_stats_examples(rng):
    sym = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]])
    st_ = erf.erf_stats(_backprop(erf.LinearStack.from_kernels([sym])))
    assert st_.mass_center == (7.0, 7.0)
    delta = np.zeros((3, 3))
    delta[1, 1] = 1.0
    st_ = erf.erf_stats(_backprop(erf.LinearStack.from_kernels([delta, delta])))
    assert st_.support_area == 1 and st_.second_moment == 0.0
    peaked = erf.LinearStack.from_kernels([sym, sym])
    flat = erf.LinearStack.from_kernels([np.ones((3, 3)), np.ones((3, 3))])
    assert erf.erf_stats(_backprop(flat)).second_moment > erf.erf_stats(_backprop(peaked)).second_moment
    assert erf.erf_stats(_backprop(flat)).density == 1.0
    with pytest.raises(ValueError):
        erf.erf_stats(erf.ErfMap(J, np.zeros(SHAPE), 1))


def test_pgm_and_tsr_export(tmp_path, rng):
    m = _backprop(_stack(rng, 2))
    pgm, tsr = erf.export_erf(m, tmp_path / "map")
    img = erf.read_pgm(pgm)
    assert img.shape == SHAPE and img.max() == 255
    assert np.array_equal(img == 0, np.round(255 * np.abs(m.values) / np.abs(m.values).max()) == 0)
    from dkern.tensor import read_tsr

    assert np.array_equal(read_tsr(tsr)[0, 0], m.values)


def test_stack_spec_round_trip(tmp_path, rng):
    stack = _dk_stack(rng, 2)
    d = erf.stack_to_dict(stack, relu=False)
    back, relu = erf.stack_from_dict(d)
    assert not relu
    assert np.array_equal(erf.displacement_field(back), erf.displacement_field(stack))
    with pytest.raises(ValueError):
        erf.stack_from_dict({"layers": [{"kernel": [[1.0]], "bogus": 1}]})
