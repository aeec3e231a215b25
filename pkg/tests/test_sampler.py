import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from dkern import sampler
from dkern.conv import ConvSpec, KernelScope, conv2d_backward
from dkern.gradcheck import finite_diff, gradcheck_op, kernel_kinks, relative_error

scope_sizes = st.sampled_from([(3, 3), (3, 4), (3, 5), (1, 2), (2, 4)])
seeds = st.integers(0, 2**31 - 1)


def _scope(values, k=1):
    v = np.asarray(values, float)
    return KernelScope(v.reshape(1, 1, *v.shape[-2:]), k)


def test_centre_of_two_by_two_scope():
    scope = _scope([[1, 2], [3, 4]])
    assert sampler.resample_kernel(scope, np.zeros(2)).item() == 2.5


def test_sample_on_lattice_point():
    scope = _scope([[1, 2], [3, 4]])
    # the base point sits at the centre; move it onto the stored value 3 (x=-0.5, y=+0.5)
    assert sampler.resample_kernel(scope, [-0.5, 0.5]).item() == 3.0


def test_zero_offsets_same_size_is_identity(rng):
    w = rng.normal(size=(2, 3, 3, 3))
    scope = KernelScope(w, 3)
    assert np.array_equal(sampler.resample_kernel(scope, np.zeros(18)), w)


def test_clip_examples():
    off = np.zeros((9, 2))
    off[4, 0] = 10.0  # centre tap of a 3x3 kernel in a 4x4 scope
    clipped = sampler.clip_offsets(off, 3, 4)
    coords = sampler.sample_coords(clipped, 3, 4)
    assert coords[4, 0] == 1.5
    inside = -0.3 * sampler.base_lattice(3, 4)  # every tap moves towards the centre
    assert np.array_equal(sampler.clip_offsets(inside, 3, 4), inside)
    edge = np.zeros((9, 2))
    edge[4] = [1.5, -1.5]
    assert np.array_equal(sampler.clip_offsets(edge, 3, 4), edge)


def test_offset_gradient_hand_example():
    scope = _scope([[1, 2], [3, 4]])
    g = sampler.sampler_grad_offsets(scope, np.zeros(2), np.ones((1, 1, 1)), 1.0)
    assert g.reshape(-1).tolist() == [1.0, 2.0]


def test_constant_scope_has_no_offset_gradient(rng):
    scope = KernelScope(np.full((1, 1, 4, 4), 0.7), 3)
    off = rng.uniform(-0.4, 0.4, size=18)
    g = sampler.sampler_grad_offsets(scope, off, rng.normal(size=(1, 3, 3)), 1.3)
    assert np.allclose(g, 0, atol=1e-15)


def test_weight_gradient_examples(rng):
    scope = KernelScope(rng.normal(size=(1, 1, 4, 4)), 3)
    patch = rng.normal(size=(1, 3, 3))
    assert not sampler.sampler_grad_weights(scope, rng.normal(size=18), patch, 0.0).any()
    # zero offsets on a same-size scope reproduce the rigid weight gradient
    w = rng.normal(size=(1, 1, 3, 3))
    gs = sampler.sampler_grad_weights(KernelScope(w, 3), np.zeros(18), patch, 2.0)
    _, gw = conv2d_backward(patch[None], w, ConvSpec(3, 1, 1), np.full((1, 1, 1, 1), 2.0))
    assert np.array_equal(gs, gw)


def test_kink_uses_left_branch():
    # coordinate exactly on the lattice line x = 0.5 of a 2x2 scope
    coords = np.array([[0.5, 0.0]])
    d = sampler.bilinear_weight_grads(coords, 2)
    lat = sampler.scope_lattice(2)
    on_line = lat[:, 0] == 0.5
    assert np.all(d[0, on_line, 0] == -0.5)
    assert np.all(d[0, ~on_line, 0] == 0.0)


def test_clipped_components_get_zero_gradient(rng):
    scope = KernelScope(rng.normal(size=(1, 1, 4, 4)), 3)
    off = np.zeros(18)
    off[8] = 5.0  # centre tap x, far past the bound
    g = sampler.sampler_grad_offsets(scope, off, rng.normal(size=(1, 3, 3)), 1.0)
    assert g.reshape(-1)[8] == 0.0


def _coords(draw_seed, k, ks, n):
    rng = np.random.default_rng(draw_seed)
    b = sampler.scope_bound(ks)
    return rng.uniform(-b, b, size=(n, k * k, 2))


@given(seeds, scope_sizes)
def test_partition_of_unity(seed, sizes):
    k, ks = sizes
    w = sampler.bilinear_weights(_coords(seed, k, ks, 20), ks)
    assert np.allclose(w.sum(-1), 1.0, rtol=0, atol=1e-12)


@given(seeds, scope_sizes)
def test_locality(seed, sizes):
    k, ks = sizes
    a = _coords(seed, k, ks, 20)
    w = sampler.bilinear_weights(a, ks)
    lat = sampler.scope_lattice(ks)
    far = (np.abs(a[..., None, 0] - lat[:, 0]) >= 1) | (np.abs(a[..., None, 1] - lat[:, 1]) >= 1)
    assert np.all(w[far] == 0)
    assert np.all((w != 0).sum(-1) <= 4)


@given(seeds, scope_sizes)
def test_constant_scope_resamples_to_constant(seed, sizes):
    k, ks = sizes
    rng = np.random.default_rng(seed)
    scope = KernelScope(np.full((1, 1, ks, ks), 2.5), k)
    out = sampler.resample_kernel(scope, rng.normal(size=2 * k * k))
    assert np.allclose(out, 2.5, rtol=0, atol=1e-12)


@given(seeds, scope_sizes)
def test_clip_idempotent_and_in_bounds(seed, sizes):
    k, ks = sizes
    off = np.random.default_rng(seed).normal(scale=3, size=(5, k * k, 2))
    once = sampler.clip_offsets(off, k, ks)
    assert np.array_equal(sampler.clip_offsets(once, k, ks), once)
    coords = sampler.sample_coords(once, k, ks)
    assert np.all(np.abs(coords) <= sampler.scope_bound(ks))


@given(seeds, st.sampled_from([(3, 3), (3, 4), (3, 5)]), st.booleans())
def test_offset_gradient_matches_finite_differences(seed, sizes, depthwise):
    k, ks = sizes
    rng = np.random.default_rng(seed)
    c = 2
    shape = (c, 1 if depthwise else c, ks, ks)
    scope = KernelScope(rng.normal(size=shape), k, depthwise)
    patch = rng.normal(size=(c, k, k))
    up = rng.normal(size=c)
    off = rng.uniform(-0.9, 0.9, size=2 * k * k)
    kinks = kernel_kinks(off.reshape(1, 1, k * k, 2), k, ks).reshape(-1)
    assume(not kinks.all())

    def f(p):
        w = sampler.resample_kernel(scope, p).reshape(c, -1, k * k)
        if depthwise:
            return float(np.sum(up[:, None] * w[:, 0] * patch.reshape(c, -1)))
        return float(np.sum(up[:, None, None] * w * patch.reshape(1, c, -1)))

    numeric = finite_diff(f, off, 1e-6)
    analytic = sampler.sampler_grad_offsets(scope, off, patch, up).reshape(-1)
    err = relative_error(analytic, numeric)[~kinks]
    assert err.max() <= 1e-5


@pytest.mark.parametrize("op", ["sampler_weights", "sampler_offsets"])
@pytest.mark.parametrize("seed", range(5))
def test_sampler_registry_entries(op, seed):
    report = gradcheck_op(op, seed)
    assert report.passed, report.format()
