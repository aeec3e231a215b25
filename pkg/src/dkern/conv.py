"""Rigid convolutions and the im2col/contraction machinery shared with the
deformable operators.

Every convolution in the package is computed as

    cols = im2col(input)            # (N, C_in, K*K, P)   P = H_out * W_out
    out  = contract(weights, cols)  # (N, C_out, P)

and the deformable operators only change how ``cols`` is produced (sampled
data) or what the weights are contracted against (patches scattered into the
scope lattice). Sharing ``contract`` is what makes zero-offset deformable
operators reproduce rigid convolution bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .sampler import base_lattice
from .tensor import relu


@dataclass(frozen=True)
class ConvSpec:
    kernel_size: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0
    depthwise: bool = False

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid conv geometry {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"invalid channel counts {self}")
        if self.depthwise and self.in_channels != self.out_channels:
            raise ValueError("depthwise convolution needs in_channels == out_channels")

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        ho = (height + 2 * p - k) // s + 1
        wo = (width + 2 * p - k) // s + 1
        if height + 2 * p < k or width + 2 * p < k or ho < 1 or wo < 1:
            raise ValueError(f"{height}x{width} input too small for {self}")
        return ho, wo

    @property
    def weight_shape(self) -> tuple[int, int]:
        return (self.out_channels, 1 if self.depthwise else self.in_channels)


@dataclass
class KernelScope:
    """A K'xK' weight grid per (out, in) channel pair and the KxK sample lattice.

    ``weights`` has shape (C_out, C_in, K', K'), or (C, 1, K', K') when
    ``depthwise``.
    """

    weights: np.ndarray
    kernel_size: int
    depthwise: bool = False

    def __post_init__(self):
        w = self.weights
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ValueError(f"scope weights must be (C_out, C_in, K', K'), got {w.shape}")
        if w.shape[2] < self.kernel_size:
            raise ValueError(f"scope size {w.shape[2]} < kernel size {self.kernel_size}")
        if self.depthwise and w.shape[1] != 1:
            raise ValueError("depthwise scope needs a singleton input-channel axis")

    @property
    def scope_size(self) -> int:
        return self.weights.shape[-1]

    @property
    def base_lattice(self) -> np.ndarray:
        return base_lattice(self.kernel_size, self.scope_size)

    @classmethod
    def rigid(cls, weights, depthwise: bool = False) -> "KernelScope":
        weights = np.asarray(weights)
        return cls(weights, weights.shape[-1], depthwise)


def _as_scope(kernel, spec: ConvSpec) -> KernelScope:
    if isinstance(kernel, KernelScope):
        return kernel
    return KernelScope.rigid(kernel, spec.depthwise)


def check_input(x: np.ndarray, spec: ConvSpec) -> tuple[int, int]:
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ValueError(f"input {x.shape} does not match {spec.in_channels} input channels")
    return spec.output_size(x.shape[2], x.shape[3])


def check_scope(scope: KernelScope, spec: ConvSpec) -> None:
    if scope.weights.shape[:2] != spec.weight_shape or scope.kernel_size != spec.kernel_size:
        raise ValueError(
            f"kernel {scope.weights.shape} (K={scope.kernel_size}) does not match {spec}"
        )
    if scope.depthwise != spec.depthwise:
        raise ValueError("kernel and spec disagree on depthwise")


def im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """(N, C, H, W) -> (N, C, K*K, H_out*W_out), zero padded."""
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    ho, wo = spec.output_size(x.shape[2], x.shape[3])
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : s * ho : s, : s * wo : s]
    n, c = x.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c, k * k, ho * wo)


def col2im(cols: np.ndarray, input_shape, spec: ConvSpec) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to the input."""
    n, c, h, w = input_shape
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    ho, wo = spec.output_size(h, w)
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    cols = cols.reshape(n, c, k, k, ho, wo)
    for ky in range(k):
        for kx in range(k):
            out[:, :, ky : ky + s * ho : s, kx : kx + s * wo : s] += cols[:, :, ky, kx]
    return out[:, :, p : p + h, p : p + w]


def contract(weights: np.ndarray, cols: np.ndarray, depthwise: bool) -> np.ndarray:
    """out[n, o, p] = sum_{c, t} weights[o, c, t] * cols[n, c, t, p].

    Depthwise accumulates taps in a fixed order; the dense path is one GEMM per
    batch item. Both are deterministic for given shapes.
    """
    if depthwise:
        out = weights[None, :, 0, 0, None] * cols[:, :, 0]
        for t in range(1, cols.shape[2]):
            out += weights[None, :, 0, t, None] * cols[:, :, t]
        return out
    n, c, t, p = cols.shape
    return np.matmul(weights.reshape(weights.shape[0], c * t), cols.reshape(n, c * t, p))


def contract_backward(weights, cols, upstream, depthwise: bool):
    """Return (grad_weights, grad_cols) for :func:`contract`."""
    if depthwise:
        gw = np.einsum("ncp,nctp->ct", upstream, cols)[:, None, :]
        gcols = weights[None, :, 0, :, None] * upstream[:, :, None, :]
        return gw, gcols
    n, c, t, p = cols.shape
    flat = cols.reshape(n, c * t, p)
    gw = np.tensordot(upstream, flat, axes=([0, 2], [0, 2])).reshape(weights.shape)
    gcols = np.matmul(weights.reshape(weights.shape[0], c * t).T, upstream)
    return gw, gcols.reshape(cols.shape)


def conv2d_rigid(x: np.ndarray, kernel, spec: ConvSpec) -> np.ndarray:
    scope = _as_scope(kernel, spec)
    check_scope(scope, spec)
    if scope.scope_size != spec.kernel_size:
        raise ValueError("rigid convolution needs scope size == kernel size")
    ho, wo = check_input(x, spec)
    w = scope.weights.reshape(scope.weights.shape[0], scope.weights.shape[1], -1)
    out = contract(w, im2col(x, spec), spec.depthwise)
    return out.reshape(x.shape[0], spec.out_channels, ho, wo)


def conv2d_relu(x: np.ndarray, kernel, spec: ConvSpec) -> np.ndarray:
    return relu(conv2d_rigid(x, kernel, spec))


def conv2d_backward(x: np.ndarray, kernel, spec: ConvSpec, upstream: np.ndarray):
    """Reverse-mode gradients of :func:`conv2d_rigid`: (grad_input, grad_weights)."""
    scope = _as_scope(kernel, spec)
    check_scope(scope, spec)
    ho, wo = check_input(x, spec)
    expected = (x.shape[0], spec.out_channels, ho, wo)
    if upstream.shape != expected:
        raise ValueError(f"upstream gradient {upstream.shape} != output shape {expected}")
    w = scope.weights.reshape(scope.weights.shape[0], scope.weights.shape[1], -1)
    cols = im2col(x, spec)
    g = upstream.reshape(expected[0], expected[1], ho * wo)
    gw, gcols = contract_backward(w, cols, g, spec.depthwise)
    return col2im(gcols, x.shape, spec), gw.reshape(scope.weights.shape)
