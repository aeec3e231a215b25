"""Central finite-difference oracle and a registry of seeded gradient checks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import sampler
from .tensor import fully_connected, fully_connected_backward, global_avg_pool, global_avg_pool_backward
from .conv import ConvSpec, KernelScope, conv2d_backward, conv2d_rigid
from .deform import (
    OffsetGeneratorGlobal,
    OffsetGeneratorLocal,
    deform_conv,
    deform_conv_backward,
    dk_backward,
)

KINK_MARGIN = 1e-3
LINEAR_TOL = 1e-6
OFFSET_TOL = 1e-4


def finite_diff(f: Callable[[np.ndarray], float], params: np.ndarray, h: float = 1e-6, indices=None) -> np.ndarray:
    """Central differences ``(f(p + h e_i) - f(p - h e_i)) / 2h``.

    Every component is perturbed unless ``indices`` (flat positions) restricts
    the sweep; skipped components are left at zero.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    p = np.array(params, dtype=np.float64)
    grad = np.zeros_like(p)
    flat, gflat = p.reshape(-1), grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + h
        fp = f(p)
        flat[i] = old - h
        fm = f(p)
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at component {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(|a|, |n|, 1e-2 * max|a|).

    The floor keeps near-zero components from turning round-off into huge
    relative errors; it is tied to the gradient's own scale.
    """
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    floor = max(1e-2 * float(np.max(np.abs(a), initial=0.0)), 1e-12)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass
class GradCheckReport:
    op_id: str
    seed: int
    tolerance: float
    max_rel_error: float
    mean_rel_error: float
    excluded: int
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def format(self) -> str:
        fields = {
            "op": self.op_id,
            "seed": self.seed,
            "tolerance": f"{self.tolerance:.3g}",
            "max_rel_error": f"{self.max_rel_error:.6e}",
            "mean_rel_error": f"{self.mean_rel_error:.6e}",
            "checked": self.checked,
            "excluded": self.excluded,
            "pass": str(self.passed).lower(),
        }
        return "\n".join(f"{k}={v}" for k, v in fields.items())


@dataclass
class _Case:
    f: Callable[[np.ndarray], float]
    params: np.ndarray
    analytic: np.ndarray
    keep: np.ndarray  # boolean mask of components to compare
    excluded_instances: int = 0
    sample: int | None = None  # compare only this many randomly chosen components


def _near_tick(values, ticks):
    d = np.abs(np.asarray(values)[..., None] - np.asarray(ticks))
    return d.min(axis=-1) < KINK_MARGIN


def kernel_kinks(raw_offsets, kernel_size: int, scope_size: int) -> np.ndarray:
    """True for offset components whose sample coordinate sits within the kink
    margin of a scope lattice line (clip bounds included)."""
    coords = sampler.sample_coords(raw_offsets, kernel_size, scope_size)
    b = sampler.scope_bound(scope_size)
    ticks = np.arange(scope_size) - b
    inside = np.abs(coords) <= b + KINK_MARGIN
    return inside & _near_tick(coords, ticks)


def data_kinks(positions) -> np.ndarray:
    return np.abs(positions - np.round(positions)) < KINK_MARGIN


def _data_positions(spec, hw, offsets):
    """Absolute sampling positions for a (N, 2K^2, Ho, Wo) data offset field."""
    n, _, ho, wo = offsets.shape
    k = spec.kernel_size
    off = offsets.reshape(n, k, k, 2, ho, wo)
    oy = np.arange(ho)[:, None] * spec.stride - spec.padding
    ox = np.arange(wo)[None, :] * spec.stride - spec.padding
    ky = np.arange(k)[:, None, None, None]
    kx = np.arange(k)[None, :, None, None]
    px = off[:, :, :, 0] + ox + kx
    py = off[:, :, :, 1] + oy + ky
    return np.stack([px, py], axis=3).reshape(offsets.shape)


# -- random instances --------------------------------------------------------

def _spec(rng, depthwise=None):
    if depthwise is None:
        depthwise = bool(rng.integers(2))
    cin = int(rng.integers(1, 4))
    cout = cin if depthwise else int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    return ConvSpec(3, cin, cout, stride, 1, depthwise)


def _scope(rng, spec, scope_size=None):
    ks = scope_size or int(rng.choice([3, 4]))
    shape = spec.weight_shape + (ks, ks)
    return KernelScope(rng.normal(size=shape), spec.kernel_size, spec.depthwise)


def _loss(out, r):
    return float(np.sum(out * r))


def _case_conv(rng, wrt):
    spec = _spec(rng)
    x = rng.normal(size=(2, spec.in_channels, 5, 5))
    w = rng.normal(size=spec.weight_shape + (3, 3))
    r = rng.normal(size=conv2d_rigid(x, w, spec).shape)
    gx, gw = conv2d_backward(x, w, spec, r)
    if wrt == "weights":
        return _Case(lambda p: _loss(conv2d_rigid(x, p, spec), r), w, gw, np.ones(w.shape, bool))
    return _Case(lambda p: _loss(conv2d_rigid(p, w, spec), r), x, gx, np.ones(x.shape, bool))


def _deform_case(rng, wrt, kernel=True, data=False, local=True):
    spec = _spec(rng)
    scope = _scope(rng, spec) if kernel else _scope(rng, spec, 3)
    # one image keeps the per-location offset vectors small enough for FD
    n = 2 if wrt in ("input", "weights") or not local else 1
    x = rng.normal(size=(n, spec.in_channels, 5, 5))
    ho, wo = spec.output_size(5, 5)
    kk = spec.kernel_size**2
    koff = None
    if kernel:
        shape = (n, 2 * kk, ho, wo) if local else (n, 2 * kk)
        koff = rng.uniform(-0.9, 0.9, size=shape)
    doff = rng.uniform(-1.5, 1.5, size=(n, 2 * kk, ho, wo)) if data else None
    out, cache = deform_conv(x, scope, spec, koff, doff)
    r = rng.normal(size=out.shape)
    grads = deform_conv_backward(cache, r)

    def run(x=x, w=scope.weights, koff=koff, doff=doff):
        s = KernelScope(w, spec.kernel_size, spec.depthwise)
        return _loss(deform_conv(x, s, spec, koff, doff)[0], r)

    if wrt == "input":
        return _Case(lambda p: run(x=p), x, grads["input"], np.ones(x.shape, bool))
    if wrt == "weights":
        return _Case(lambda p: run(w=p), scope.weights, grads["weights"], np.ones(scope.weights.shape, bool))
    if wrt == "kernel_offsets":
        internal = koff.reshape(koff.shape[0], kk, 2, -1).transpose(0, 3, 1, 2) if local else koff.reshape(-1, 1, kk, 2)
        kinks = kernel_kinks(internal, spec.kernel_size, scope.scope_size)
        kinks = kinks.transpose(0, 2, 3, 1).reshape(koff.shape) if local else kinks.reshape(koff.shape)
        return _Case(lambda p: run(koff=p), koff, grads["kernel_offsets"], ~kinks)
    kinks = data_kinks(_data_positions(spec, (ho, wo), doff))
    return _Case(lambda p: run(doff=p), doff, grads["data_offsets"], ~kinks)


def _sampler_case(rng, wrt):
    """Single-location kernel resampling, checked through the sampler's own gradients."""
    spec = _spec(rng)
    scope = _scope(rng, spec)
    k = spec.kernel_size
    patch = rng.normal(size=(spec.in_channels, k, k))
    up = rng.normal(size=spec.out_channels)
    offsets = rng.uniform(-0.9, 0.9, size=2 * k * k)

    def out(w, off):
        sampled = sampler.resample_kernel(KernelScope(w, k, spec.depthwise), off)
        sampled = sampled.reshape(spec.out_channels, -1, k * k)
        if spec.depthwise:
            return float(np.sum(up * np.einsum("ok,ok->o", sampled[:, 0], patch.reshape(-1, k * k))))
        return float(np.sum(up * np.einsum("ock,ck->o", sampled, patch.reshape(-1, k * k))))

    if wrt == "weights":
        g = sampler.sampler_grad_weights(scope, offsets, patch, up)
        return _Case(lambda p: out(p, offsets), scope.weights, g, np.ones(scope.weights.shape, bool))
    g = sampler.sampler_grad_offsets(scope, offsets, patch, up).reshape(offsets.shape)
    kinks = kernel_kinks(offsets.reshape(1, 1, k * k, 2), k, scope.scope_size).reshape(offsets.shape)
    return _Case(lambda p: out(scope.weights, p), offsets, g, ~kinks)


def _head_case(rng, wrt):
    """Global average pool followed by the fully connected head."""
    n, c, m = 2, int(rng.integers(1, 5)), int(rng.integers(1, 5))
    x = rng.normal(size=(n, c, 3, 4))
    w, b = rng.normal(size=(m, c)), rng.normal(size=m)
    r = rng.normal(size=(n, m, 1, 1))
    pooled = global_avg_pool(x)
    gp, gw, gb = fully_connected_backward(pooled, w, r)
    if wrt == "input":
        gx = global_avg_pool_backward(gp, x.shape)
        return _Case(lambda p: _loss(fully_connected(global_avg_pool(p), w, b), r), x, gx, np.ones(x.shape, bool))
    params = np.concatenate([w.ravel(), b])
    analytic = np.concatenate([gw.ravel(), gb])

    def f(p):
        return _loss(fully_connected(pooled, p[: w.size].reshape(w.shape), p[w.size :]), r)

    return _Case(f, params, analytic, np.ones(params.shape, bool))


def _generator_case(rng, kind, wrt):
    """Generator-driven DK layer; instances with any kink-adjacent sample are redrawn."""
    for attempt in range(100):
        spec = _spec(rng)
        scope = _scope(rng, spec)
        x = rng.normal(size=(2, spec.in_channels, 5, 5))
        k = spec.kernel_size
        if kind == "local":
            gen = OffsetGeneratorLocal.for_target(spec)
            gen.weights = rng.normal(scale=0.2, size=gen.weights.shape)
        else:
            gen = OffsetGeneratorGlobal.zeros(spec.in_channels, k)
            gen.weights = rng.normal(scale=0.5, size=gen.weights.shape)
        gen.bias = rng.uniform(-0.6, 0.6, size=gen.bias.shape)
        raw = gen(x)
        n = raw.shape[0]
        internal = raw.reshape(n, k * k, 2, -1).transpose(0, 3, 1, 2)
        if not kernel_kinks(internal, k, scope.scope_size).any():
            break
    else:  # pragma: no cover - practically unreachable
        raise RuntimeError("could not draw a kink-free generator instance")
    out, _ = deform_conv(x, scope, spec, raw)
    r = rng.normal(size=out.shape)
    gx, _, ggen = dk_backward(x, scope, gen, spec, r)

    def run(x=x, gw=gen.weights, gb=gen.bias):
        g = type(gen)(gw, gb, gen.spec) if kind == "local" else type(gen)(gw, gb)
        return _loss(deform_conv(x, scope, spec, g(x))[0], r)

    if wrt == "input":
        case = _Case(lambda p: run(x=p), x, gx, np.ones(x.shape, bool))
    elif wrt == "weights":
        case = _Case(lambda p: run(gw=p), gen.weights, ggen["weights"], np.ones(gen.weights.shape, bool))
    else:
        case = _Case(lambda p: run(gb=p), gen.bias, ggen["bias"], np.ones(gen.bias.shape, bool))
    case.excluded_instances = attempt
    return case


def _generator_params(rng, kind):
    a = _generator_case(rng, kind, "weights")
    b = _generator_case(np.random.default_rng(rng.integers(2**32)), kind, "bias")
    # report both parameter groups as one flat vector
    params = np.concatenate([a.params.ravel(), b.params.ravel()])
    analytic = np.concatenate([a.analytic.ravel(), b.analytic.ravel()])
    na = a.params.size

    def f(p):
        return a.f(p[:na].reshape(a.params.shape)) + b.f(p[na:].reshape(b.params.shape))

    case = _Case(f, params, analytic, np.ones(params.shape, bool))
    case.excluded_instances = a.excluded_instances + b.excluded_instances
    return case


def _model_params(rng):
    from .model import model_gradcheck_case

    f, params, analytic = model_gradcheck_case(rng)
    return _Case(f, params, analytic, np.ones(params.shape, bool), sample=150)


REGISTRY: dict[str, tuple[Callable[[np.random.Generator], _Case], float]] = {
    "conv_weights": (lambda rng: _case_conv(rng, "weights"), LINEAR_TOL),
    "conv_input": (lambda rng: _case_conv(rng, "input"), LINEAR_TOL),
    "sampler_weights": (lambda rng: _sampler_case(rng, "weights"), LINEAR_TOL),
    "sampler_offsets": (lambda rng: _sampler_case(rng, "offsets"), OFFSET_TOL),
    "pool_input": (lambda rng: _head_case(rng, "input"), LINEAR_TOL),
    "fc_params": (lambda rng: _head_case(rng, "params"), LINEAR_TOL),
    "dk_weights": (lambda rng: _deform_case(rng, "weights"), LINEAR_TOL),
    "dk_input": (lambda rng: _deform_case(rng, "input"), LINEAR_TOL),
    "dk_offsets": (lambda rng: _deform_case(rng, "kernel_offsets"), OFFSET_TOL),
    "dk_offsets_global": (lambda rng: _deform_case(rng, "kernel_offsets", local=False), OFFSET_TOL),
    "dc_weights": (lambda rng: _deform_case(rng, "weights", kernel=False, data=True), LINEAR_TOL),
    "dc_input": (lambda rng: _deform_case(rng, "input", kernel=False, data=True), LINEAR_TOL),
    "dc_offsets": (lambda rng: _deform_case(rng, "data_offsets", kernel=False, data=True), OFFSET_TOL),
    "dcdk_kernel_offsets": (lambda rng: _deform_case(rng, "kernel_offsets", data=True), OFFSET_TOL),
    "dcdk_data_offsets": (lambda rng: _deform_case(rng, "data_offsets", data=True), OFFSET_TOL),
    "generator_params": (lambda rng: _generator_params(rng, "local"), OFFSET_TOL),
    "generator_params_global": (lambda rng: _generator_params(rng, "global"), OFFSET_TOL),
    "dk_layer_input": (lambda rng: _generator_case(rng, "local", "input"), OFFSET_TOL),
    "model_params": (_model_params, OFFSET_TOL),
}


def gradcheck_op(op_id: str, seed: int = 0, tolerance: float | None = None, h: float = 1e-6) -> GradCheckReport:
    if op_id not in REGISTRY:
        raise KeyError(f"unknown op id {op_id!r}; known: {', '.join(sorted(REGISTRY))}")
    build, default_tol = REGISTRY[op_id]
    tol = default_tol if tolerance is None else tolerance
    rng = np.random.default_rng(seed)
    case = build(rng)
    if case.sample is not None and case.sample < case.params.size:
        picked = np.zeros(case.params.size, bool)
        picked[rng.choice(case.params.size, case.sample, replace=False)] = True
        case.keep = case.keep & picked.reshape(case.params.shape)
    numeric = finite_diff(case.f, case.params, h, indices=np.flatnonzero(case.keep))
    err = relative_error(case.analytic, numeric)[case.keep]
    excluded = case.excluded_instances
    if case.sample is None:
        excluded += int(np.sum(~case.keep))
    return GradCheckReport(
        op_id=op_id,
        seed=seed,
        tolerance=tol,
        max_rel_error=float(err.max(initial=0.0)),
        mean_rel_error=float(err.mean()) if err.size else 0.0,
        excluded=excluded,
        checked=int(err.size),
    )
