"""Bilinear resampling of kernels from a K'xK' scope.

Coordinates are continuous (x, y) pairs centred on the scope: stored weights
sit on the integer-spaced lattice spanning ``[-(K'-1)/2, (K'-1)/2]`` on each
axis, row-major with rows indexing y. Kernel offsets have trailing shape
``(K*K, 2)`` holding (dx, dy) per base-lattice point, which is the interleaved
``2*K*K`` vector emitted by the offset generators reshaped.
"""
from __future__ import annotations

import numpy as np


def scope_bound(scope_size: int) -> float:
    return (scope_size - 1) / 2


def scope_lattice(scope_size: int) -> np.ndarray:
    """(K'*K', 2) coordinates of the stored weights."""
    ticks = np.arange(scope_size, dtype=np.float64) - scope_bound(scope_size)
    ys, xs = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=-1)


def base_lattice(kernel_size: int, scope_size: int) -> np.ndarray:
    """(K*K, 2) resting sample points, spread uniformly over the whole scope."""
    if scope_size < kernel_size:
        raise ValueError(f"scope size {scope_size} smaller than kernel size {kernel_size}")
    if kernel_size == scope_size:
        ticks = np.arange(kernel_size, dtype=np.float64) - scope_bound(scope_size)
    elif kernel_size == 1:
        ticks = np.zeros(1)
    else:
        b = scope_bound(scope_size)
        ticks = np.linspace(-b, b, kernel_size)
    ys, xs = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=-1)


def as_offsets(offsets, kernel_size: int) -> np.ndarray:
    """Accept flat ``2K^2`` vectors or ``(K^2, 2)`` arrays (with leading dims)."""
    offsets = np.asarray(offsets)
    kk = kernel_size * kernel_size
    if offsets.shape[-2:] == (kk, 2):
        return offsets
    if offsets.shape[-1] == 2 * kk:
        return offsets.reshape(offsets.shape[:-1] + (kk, 2))
    raise ValueError(f"offsets of shape {offsets.shape} do not fit a {kernel_size}x{kernel_size} kernel")


def offset_limits(kernel_size: int, scope_size: int):
    """Per-component (low, high) offset limits keeping samples inside the scope."""
    base = base_lattice(kernel_size, scope_size)
    b = scope_bound(scope_size)
    return -b - base, b - base


def clip_offsets(offsets, kernel_size: int, scope_size: int) -> np.ndarray:
    offsets = as_offsets(offsets, kernel_size)
    lo, hi = offset_limits(kernel_size, scope_size)
    return np.clip(offsets, lo, hi)


def clip_mask(offsets, kernel_size: int, scope_size: int) -> np.ndarray:
    """1 where a component passes through clipping untouched, 0 where it was clamped."""
    offsets = as_offsets(offsets, kernel_size)
    lo, hi = offset_limits(kernel_size, scope_size)
    return ((offsets >= lo) & (offsets <= hi)).astype(offsets.dtype)


def sample_coords(offsets, kernel_size: int, scope_size: int) -> np.ndarray:
    return base_lattice(kernel_size, scope_size) + as_offsets(offsets, kernel_size)


def _tent(d):
    return np.maximum(0.0, 1.0 - np.abs(d))


def bilinear_weights(coords: np.ndarray, scope_size: int) -> np.ndarray:
    """B(a, k') for every sample ``a`` in ``coords[..., :, :]`` and scope point k'.

    Returns shape ``coords.shape[:-1] + (K'*K',)``.
    """
    lat = scope_lattice(scope_size).astype(coords.dtype)
    dx = coords[..., None, 0] - lat[:, 0]
    dy = coords[..., None, 1] - lat[:, 1]
    return _tent(dx) * _tent(dy)


def bilinear_weight_grads(coords: np.ndarray, scope_size: int) -> np.ndarray:
    """dB/d(ax, ay), shape ``coords.shape[:-1] + (K'*K', 2)``.

    Branches follow the tent's case split: 0 once |a - k'| >= 1, +1 while
    a < k', and -1 for a >= k' (so the lattice line itself takes -1).
    """
    lat = scope_lattice(scope_size).astype(coords.dtype)
    dx = coords[..., None, 0] - lat[:, 0]
    dy = coords[..., None, 1] - lat[:, 1]

    def slope(d):
        return np.where(np.abs(d) >= 1, 0.0, np.where(d < 0, 1.0, -1.0)).astype(coords.dtype)

    return np.stack([slope(dx) * _tent(dy), _tent(dx) * slope(dy)], axis=-1)


# -- scope-level operations --------------------------------------------------

def _flat_scope(scope) -> np.ndarray:
    w = scope.weights
    return w.reshape(w.shape[0], w.shape[1], -1)


def resample_kernel(scope, offsets) -> np.ndarray:
    """Sample a KxK kernel from ``scope`` at ``base + clip(offsets)``.

    ``offsets`` may carry leading batch dims; the result then has shape
    ``offsets.shape[:-2] + (C_out, C_in, K, K)``.
    """
    k = scope.kernel_size
    offsets = clip_offsets(offsets, k, scope.scope_size)
    coords = sample_coords(offsets, k, scope.scope_size).astype(scope.weights.dtype)
    bw = bilinear_weights(coords, scope.scope_size)
    sampled = np.einsum("...kq,ocq->...ock", bw, _flat_scope(scope))
    return sampled.reshape(sampled.shape[:-1] + (k, k))


def _grad_sampled(scope, input_patch, upstream_grad) -> np.ndarray:
    """dL/dW' for one output location: (C_out, C_in, K*K)."""
    c_out, c_in = scope.weights.shape[:2]
    kk = scope.kernel_size**2
    patch = np.asarray(input_patch, dtype=scope.weights.dtype).reshape(-1, kk)
    up = np.broadcast_to(np.asarray(upstream_grad, dtype=scope.weights.dtype), (c_out,))
    if scope.depthwise:
        return (up[:, None] * patch)[:, None, :]
    return up[:, None, None] * patch[None, :, :]


def kernel_grad_to_offsets(scope, offsets, grad_sampled) -> np.ndarray:
    """Chain dL/dW' (..., C_out, C_in, K*K) to the raw (unclipped) offsets."""
    k, ks = scope.kernel_size, scope.scope_size
    offsets = as_offsets(offsets, k)
    coords = sample_coords(clip_offsets(offsets, k, ks), k, ks)
    db = bilinear_weight_grads(coords, ks)
    # sum over out/in channels first, then over scope points
    ws = np.einsum("...ock,ocq->...kq", grad_sampled, _flat_scope(scope))
    grad = np.einsum("...kq,...kqa->...ka", ws, db)
    return grad * clip_mask(offsets, k, ks)


def kernel_grad_to_scope(scope, offsets, grad_sampled) -> np.ndarray:
    k, ks = scope.kernel_size, scope.scope_size
    coords = sample_coords(clip_offsets(offsets, k, ks), k, ks)
    bw = bilinear_weights(coords.astype(scope.weights.dtype), ks)
    bw = bw.reshape((-1,) + bw.shape[-2:])
    gs = grad_sampled.reshape((-1,) + grad_sampled.shape[-3:])
    grad = np.einsum("nock,nkq->ocq", gs, bw)
    return grad.reshape(scope.weights.shape)


def sampler_grad_offsets(scope, offsets, input_patch, upstream_grad) -> np.ndarray:
    """dL/d(offsets) for one output ``O = sum_k patch_k W'_k`` scaled by ``upstream_grad``.

    ``input_patch`` is (C_in, K, K); ``upstream_grad`` is a scalar or one value
    per output channel. Clamped components get zero gradient.
    """
    gs = _grad_sampled(scope, input_patch, upstream_grad)
    return kernel_grad_to_offsets(scope, offsets, gs)


def sampler_grad_weights(scope, offsets, input_patch, upstream_grad) -> np.ndarray:
    gs = _grad_sampled(scope, input_patch, upstream_grad)
    return kernel_grad_to_scope(scope, offsets, gs)
