"""Runtime-adaptive convolutions: global/local deformable kernels (kernel-space
sampling), deformable convolution (data-space sampling) and their combination.

All four share one engine, :func:`deform_conv`:

* data offsets replace ``im2col`` by bilinear sampling of the input plane;
* kernel offsets scatter each patch onto the K'xK' scope lattice with the
  bilinear weights, ``Z[q] = sum_k B(k + dk, q) * patch[k]``, after which the
  stored scope weights are contracted against ``Z`` exactly like a rigid
  kernel is contracted against ``patch``.

Offset layouts follow the generators: ``(N, 2K^2)`` for one set per image and
``(N, 2K^2, H_out, W_out)`` for one set per output location, interleaved
(dx, dy) per tap in row-major tap order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sampler
from .conv import (
    ConvSpec,
    KernelScope,
    check_input,
    check_scope,
    col2im,
    contract,
    contract_backward,
    conv2d_backward,
    conv2d_rigid,
    im2col,
)
from .tensor import fully_connected, fully_connected_backward, global_avg_pool, global_avg_pool_backward


# -- offset generators -------------------------------------------------------

@dataclass
class OffsetGeneratorGlobal:
    """Global average pool followed by a linear map to ``2K^2`` offsets."""

    weights: np.ndarray  # (2K^2, C)
    bias: np.ndarray  # (2K^2,)

    @classmethod
    def zeros(cls, channels: int, kernel_size: int, dtype=np.float64):
        m = 2 * kernel_size * kernel_size
        return cls(np.zeros((m, channels), dtype), np.zeros(m, dtype))

    def __call__(self, x):
        n = x.shape[0]
        return fully_connected(global_avg_pool(x), self.weights, self.bias).reshape(n, -1)

    def backward(self, x, upstream):
        """Return (grad_input, {"weights", "bias"}) for ``upstream`` of shape (N, 2K^2)."""
        pooled = global_avg_pool(x)
        g = upstream.reshape(upstream.shape[0], -1, 1, 1)
        gp, gw, gb = fully_connected_backward(pooled, self.weights, g)
        return global_avg_pool_backward(gp, x.shape), {"weights": gw, "bias": gb}


@dataclass
class OffsetGeneratorLocal:
    """A convolution shaped like the target one but with ``2K^2`` output channels."""

    weights: np.ndarray  # (2K^2, C, K, K)
    bias: np.ndarray  # (2K^2,)
    spec: ConvSpec = field(repr=False)

    @classmethod
    def for_target(cls, target: ConvSpec, dtype=np.float64):
        k = target.kernel_size
        spec = ConvSpec(k, target.in_channels, 2 * k * k, target.stride, target.padding)
        return cls(np.zeros((2 * k * k, target.in_channels, k, k), dtype), np.zeros(2 * k * k, dtype), spec)

    def __call__(self, x):
        out = conv2d_rigid(x, self.weights, self.spec)
        return out + self.bias[None, :, None, None]

    def backward(self, x, upstream):
        gx, gw = conv2d_backward(x, self.weights, self.spec, upstream)
        return gx, {"weights": gw, "bias": upstream.sum(axis=(0, 2, 3))}


# -- layout helpers ----------------------------------------------------------

def _offsets_in(offsets, n: int, kk: int, ho: int, wo: int, per_image_ok: bool):
    """Generator layout -> (N, P or 1, K^2, 2)."""
    offsets = np.asarray(offsets)
    if offsets.ndim == 2 and per_image_ok:
        if offsets.shape != (n, 2 * kk):
            raise ValueError(f"per-image offsets must be ({n}, {2 * kk}), got {offsets.shape}")
        return offsets.reshape(n, 1, kk, 2)
    if offsets.shape != (n, 2 * kk, ho, wo):
        raise ValueError(f"offset field must be ({n}, {2 * kk}, {ho}, {wo}), got {offsets.shape}")
    return offsets.reshape(n, kk, 2, ho * wo).transpose(0, 3, 1, 2)


def _offsets_out(internal, original_shape):
    if len(original_shape) == 2:
        return internal.reshape(original_shape)
    n, _, ho, wo = original_shape
    return internal.transpose(0, 2, 3, 1).reshape(original_shape)


# -- data-plane bilinear sampling -------------------------------------------

def _sample_positions(spec: ConvSpec, ho: int, wo: int, offsets):
    """Sampling positions (N, K^2, P) in unpadded input coordinates."""
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    oy, ox = np.divmod(np.arange(ho * wo), wo)
    ky, kx = np.divmod(np.arange(k * k), k)
    py = (oy[None, :] * s - p + ky[:, None]).astype(offsets.dtype)
    px = (ox[None, :] * s - p + kx[:, None]).astype(offsets.dtype)
    # offsets arrive as (N, P, K^2, 2)
    return py + offsets[..., 1].transpose(0, 2, 1), px + offsets[..., 0].transpose(0, 2, 1)


def sample_patches(x: np.ndarray, offsets, spec: ConvSpec):
    """Bilinearly sample shifted patches; reads outside the image are zero.

    ``offsets`` is (N, P, K^2, 2). Returns cols (N, C, K^2, P) and a cache.
    """
    n, c, h, w = x.shape
    ho, wo = spec.output_size(h, w)
    py, px = _sample_positions(spec, ho, wo, offsets.astype(x.dtype))
    y0, x0 = np.floor(py), np.floor(px)
    fy, fx = py - y0, px - x0
    y0, x0 = y0.astype(np.int64), x0.astype(np.int64)
    flat = x.reshape(n, c, h * w)
    k2 = py.shape[1]
    corners = []
    for dy, dx, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.where(valid, yy * w + xx, 0).reshape(n, 1, -1)
        vals = np.take_along_axis(flat, np.broadcast_to(idx, (n, c, idx.shape[-1])), axis=2)
        vals = np.where(valid.reshape(n, 1, -1), vals, 0).reshape(n, c, k2, -1)
        corners.append((idx.reshape(n, k2, -1), valid, wgt, vals))
    cols = corners[0][2][:, None] * corners[0][3]
    for _, _, wgt, vals in corners[1:]:
        cols = cols + wgt[:, None] * vals
    return cols, {"corners": corners, "fy": fy, "fx": fx, "shape": x.shape}


def sample_patches_backward(gcols: np.ndarray, cache):
    """Return (grad_input, grad_offsets (N, P, K^2, 2))."""
    n, c, h, w = cache["shape"]
    corners, fy, fx = cache["corners"], cache["fy"], cache["fx"]
    plane = np.arange(n * c).reshape(n, c, 1) * (h * w)
    index, weight = [], []
    for idx, valid, wgt, _ in corners:
        contrib = gcols * np.where(valid, wgt, 0)[:, None]
        index.append((plane + idx.reshape(n, 1, -1)).ravel())
        weight.append(contrib.ravel())
    gx = np.bincount(np.concatenate(index), np.concatenate(weight), minlength=n * c * h * w)
    gx = gx.astype(gcols.dtype).reshape(n, c, h, w)

    v00, v01, v10, v11 = (corner[3] for corner in corners)
    dvdy = (1 - fx)[:, None] * (v10 - v00) + fx[:, None] * (v11 - v01)
    dvdx = (1 - fy)[:, None] * (v01 - v00) + fy[:, None] * (v11 - v10)
    gy = (gcols * dvdy).sum(axis=1)
    gxo = (gcols * dvdx).sum(axis=1)
    goff = np.stack([gxo, gy], axis=-1).transpose(0, 2, 1, 3)
    return gx, goff


# -- kernel-space scatter -----------------------------------------------------

def _scatter(cols, bw):
    """Z[n, c, q, p] = sum_k bw[n, p, k, q] * cols[n, c, k, p]; bw's P axis may be 1.

    With one-hot ``bw`` every other term is an exact zero, so Z equals the
    patches bit for bit.
    """
    if bw.shape[1] == 1:
        z = np.matmul(bw[:, 0].transpose(0, 2, 1)[:, None], cols)  # (N, C, Q, P)
        return z
    z = np.matmul(cols.transpose(0, 3, 1, 2), bw)  # (N, P, C, Q)
    return np.ascontiguousarray(z.transpose(0, 2, 3, 1))


# -- engine ------------------------------------------------------------------

def deform_conv(x, scope: KernelScope, spec: ConvSpec, kernel_offsets=None, data_offsets=None):
    """Forward pass shared by every convolution flavour. Returns (output, cache).

    ``kernel_offsets`` may be per image (N, 2K^2) or per location
    (N, 2K^2, H_out, W_out); ``data_offsets`` is always per location.
    """
    check_scope(scope, spec)
    ho, wo = check_input(x, spec)
    n, kk = x.shape[0], spec.kernel_size**2
    cache = {"x": x, "scope": scope, "spec": spec, "hw": (ho, wo)}

    if data_offsets is None:
        cols = im2col(x, spec)
    else:
        doff = _offsets_in(data_offsets, n, kk, ho, wo, per_image_ok=False)
        cols, cache["sampling"] = sample_patches(x, doff, spec)
        cache["data_shape"] = np.shape(data_offsets)

    w = scope.weights.reshape(scope.weights.shape[0], scope.weights.shape[1], -1)
    if kernel_offsets is None:
        if scope.scope_size != spec.kernel_size:
            raise ValueError("a scope larger than the kernel needs kernel offsets")
        z = cols
    else:
        raw = _offsets_in(kernel_offsets, n, kk, ho, wo, per_image_ok=True)
        clipped = sampler.clip_offsets(raw, spec.kernel_size, scope.scope_size)
        coords = sampler.sample_coords(clipped, spec.kernel_size, scope.scope_size).astype(x.dtype)
        bw = sampler.bilinear_weights(coords, scope.scope_size)
        cache.update(raw=raw, clipped=clipped, coords=coords, bw=bw,
                     kernel_shape=np.shape(kernel_offsets))
        if spec.depthwise:
            # resample the kernel per location, then contract taps in the rigid order
            wk = np.matmul(bw, w[:, 0].T).transpose(0, 3, 2, 1)  # (N, C, K^2, P|1)
            out = wk[:, :, 0] * cols[:, :, 0]
            for t in range(1, kk):
                out += wk[:, :, t] * cols[:, :, t]
            cache["cols"], cache["wk"] = cols, wk
            return out.reshape(n, spec.out_channels, ho, wo), cache
        z = _scatter(cols, bw)
    cache["cols"], cache["z"] = cols, z
    out = contract(w, z, spec.depthwise)
    return out.reshape(n, spec.out_channels, ho, wo), cache


def _depthwise_kernel_backward(cache, g, w):
    """Gradients for the resampled-kernel depthwise path: (grad scope, grad bw, grad cols).

    The scope gradient goes through the scattered patches so that it matches
    the rigid weight gradient exactly when the sampling is one-hot.
    """
    cols, wk, bw = cache["cols"], cache["wk"], cache["bw"]
    gscope, _ = contract_backward(w, _scatter(cols, bw), g, True)
    gwk = cols * g[:, :, None, :]  # (N, C, K^2, P)
    gcols = wk * g[:, :, None, :]
    if bw.shape[1] == 1:
        gwk = gwk.sum(axis=3, keepdims=True)
    gb = np.matmul(gwk.transpose(0, 3, 2, 1), w[:, 0])  # (N, P|1, K^2, Q)
    return gscope, gb, gcols


def deform_conv_backward(cache, upstream):
    """Return dict with ``input``, ``weights`` and, when present,
    ``kernel_offsets`` / ``data_offsets`` gradients (in the caller's layouts)."""
    x, scope, spec = cache["x"], cache["scope"], cache["spec"]
    ho, wo = cache["hw"]
    n = x.shape[0]
    if upstream.shape != (n, spec.out_channels, ho, wo):
        raise ValueError(f"upstream gradient has shape {upstream.shape}")
    g = upstream.reshape(n, spec.out_channels, ho * wo)
    w = scope.weights.reshape(scope.weights.shape[0], scope.weights.shape[1], -1)
    cols = cache["cols"]
    if "wk" in cache:
        gw, gb, gcols = _depthwise_kernel_backward(cache, g, w)
    else:
        gw, gz = contract_backward(w, cache["z"], g, spec.depthwise)
        gcols = gz
        if "bw" in cache:
            # dense layers: the kernel acts on patches scattered into the scope
            bw = cache["bw"]
            if bw.shape[1] != 1:
                gcols = np.einsum("npkq,ncqp->nckp", bw, gz, optimize=True)
                gb = np.einsum("nckp,ncqp->npkq", cols, gz, optimize=True)
            else:
                gcols = np.einsum("nkq,ncqp->nckp", bw[:, 0], gz, optimize=True)
                gb = np.einsum("nckp,ncqp->nkq", cols, gz, optimize=True)[:, None]
    grads = {"weights": gw.reshape(scope.weights.shape)}

    if "bw" in cache:
        db = sampler.bilinear_weight_grads(cache["coords"], scope.scope_size)
        gcoord = np.einsum("npkq,npkqa->npka", gb, db)
        gcoord = gcoord * sampler.clip_mask(cache["raw"], spec.kernel_size, scope.scope_size)
        grads["kernel_offsets"] = _offsets_out(gcoord, cache["kernel_shape"])

    if "sampling" in cache:
        gx, goff = sample_patches_backward(gcols, cache["sampling"])
        grads["data_offsets"] = _offsets_out(goff, cache["data_shape"])
    else:
        gx = col2im(gcols, x.shape, spec)
    grads["input"] = gx
    return grads


# -- public operators --------------------------------------------------------

def dk_apply(x, scope, offsets, spec):
    """Deformable kernel with externally supplied (per-image or per-location) offsets."""
    return deform_conv(x, scope, spec, kernel_offsets=offsets)[0]


def dk_forward_global(x, scope: KernelScope, gen: OffsetGeneratorGlobal, spec: ConvSpec):
    """One kernel offset set per image. Returns (output, clipped offsets (N, 2K^2))."""
    if gen.weights.shape[1] != x.shape[1]:
        raise ValueError("generator channel count does not match the input")
    raw = gen(x)
    out, cache = deform_conv(x, scope, spec, kernel_offsets=raw)
    return out, cache["clipped"].reshape(raw.shape)


def dk_forward_local(x, scope: KernelScope, gen: OffsetGeneratorLocal, spec: ConvSpec):
    """One kernel offset set per output location. Returns (output, clipped field)."""
    raw = gen(x)
    if raw.shape[2:] != spec.output_size(x.shape[2], x.shape[3]):
        raise ValueError("generator output does not match the convolution's output size")
    out, cache = deform_conv(x, scope, spec, kernel_offsets=raw)
    return out, _offsets_out(cache["clipped"], raw.shape)


def dc_forward(x, kernel, data_offsets, spec: ConvSpec):
    scope = kernel if isinstance(kernel, KernelScope) else KernelScope.rigid(kernel, spec.depthwise)
    return deform_conv(x, scope, spec, data_offsets=data_offsets)[0]


def dcdk_forward(x, scope: KernelScope, kernel_offsets, data_offsets, spec: ConvSpec):
    return deform_conv(x, scope, spec, kernel_offsets=kernel_offsets, data_offsets=data_offsets)[0]


def dk_backward(x, scope: KernelScope, gen, spec: ConvSpec, upstream):
    """Gradients of a generator-driven DK layer (global or local generator).

    Returns (grad_input, grad_scope, grad_generator_params). ``grad_input``
    includes the path through the offset generator.
    """
    raw = gen(x)
    _, cache = deform_conv(x, scope, spec, kernel_offsets=raw)
    grads = deform_conv_backward(cache, upstream)
    gx_gen, ggen = gen.backward(x, grads["kernel_offsets"])
    return grads["input"] + gx_gen, grads["weights"], ggen
