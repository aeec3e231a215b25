"""Effective receptive fields, computed two independent ways.

* :func:`erf_backprop` differentiates one output unit of a real
  :class:`~dkern.model.ModelGraph` with respect to every input pixel.
* The ``erf_enumerate*`` family sums kernel products over paths through a
  stride-1 single-channel :class:`LinearStack`, i.e. the unrolled
  convolution: ``R(i; j) = sum over (k_1..k_n) with j + sum k_s = i of
  prod_s W_s[k_s]``.

Pixel coordinates are (row, col) pairs; kernel taps are indexed by centred
(row, col) displacements ``k`` in ``[-K//2, K//2]^2``. A layer with data
offsets samples its input at ``j + k + dj``; fractional positions spread over
the four surrounding pixels with bilinear weights, so every path is a product
of (tap value x corner weight) terms with an integer displacement.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from . import sampler
from .conv import ConvSpec, KernelScope
from .model import Conv, Deform, ModelGraph, ReLU
from .tensor import write_tsr

PATH_GUARD = 10**8
_CHUNK = 10**6


class IntractableError(ValueError):
    pass


# -- linear stacks -------------------------------------------------------------

@dataclass
class StackLayer:
    """One single-channel stride-1 layer of a linear stack.

    ``kernel`` holds rigid KxK values; alternatively ``scope`` (K'xK') plus
    ``kernel_offsets`` (K^2, 2) describes a deformable kernel. ``data_offsets``
    (K^2, 2), given as (dx, dy) per tap, shifts every sample of the layer.
    """

    kernel: np.ndarray | None = None
    scope: np.ndarray | None = None
    kernel_size: int | None = None
    kernel_offsets: np.ndarray | None = None
    data_offsets: np.ndarray | None = None

    def __post_init__(self):
        if self.kernel is None and self.scope is None:
            raise ValueError("a stack layer needs a kernel or a scope")
        if self.kernel_size is None:
            self.kernel_size = (self.kernel if self.kernel is not None else self.scope).shape[-1]
        k = self.kernel_size
        if self.kernel is not None and self.kernel.shape != (k, k):
            raise ValueError("kernels must be square KxK arrays")
        if self.kernel_offsets is not None:
            self.kernel_offsets = sampler.as_offsets(self.kernel_offsets, k)
        if self.data_offsets is not None:
            self.data_offsets = sampler.as_offsets(self.data_offsets, k)

    @property
    def deformable_kernel(self) -> bool:
        return self.scope is not None

    def tap_values(self) -> np.ndarray:
        """Kernel values at the (possibly resampled) taps, shape (K, K)."""
        if self.scope is None:
            return np.asarray(self.kernel, float)
        scope = KernelScope(np.asarray(self.scope, float)[None, None], self.kernel_size)
        offsets = self.kernel_offsets if self.kernel_offsets is not None else np.zeros((self.kernel_size**2, 2))
        return sampler.resample_kernel(scope, offsets)[0, 0]

    def atoms(self):
        """(tap index, dy, dx, corner weight) for every integer displacement reached."""
        k = self.kernel_size
        c = k // 2
        out = []
        for t in range(k * k):
            ty, tx = divmod(t, k)
            dy, dx = float(ty - c), float(tx - c)
            if self.data_offsets is not None:
                dx += self.data_offsets[t, 0]
                dy += self.data_offsets[t, 1]
            y0, x0 = int(np.floor(dy)), int(np.floor(dx))
            fy, fx = dy - y0, dx - x0
            for cy, cx, w in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                              (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
                if w != 0:
                    out.append((t, y0 + cy, x0 + cx, w))
        return out

    def reach(self) -> int:
        """Largest |displacement| along either axis."""
        return max(max(abs(dy), abs(dx)) for _, dy, dx, _ in self.atoms())


@dataclass
class LinearStack:
    layers: list[StackLayer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a stack needs at least one layer")

    @classmethod
    def from_kernels(cls, kernels) -> "LinearStack":
        return cls([StackLayer(kernel=np.asarray(k, float)) for k in kernels])

    @property
    def depth(self) -> int:
        return len(self.layers)

    def rf_half_width(self) -> int:
        return sum(layer.reach() for layer in self.layers)

    def path_count(self, skip: int | None = None) -> int:
        counts = [len(l.atoms()) for s, l in enumerate(self.layers) if s != skip]
        return int(np.prod(counts, dtype=object)) if counts else 1


def stack_from_dict(d: dict) -> tuple[LinearStack, bool]:
    """Parse a stack description: ``{"relu": bool, "layers": [{"kernel": ...} |
    {"scope": ..., "kernel_size": K, "kernel_offsets": ..., "data_offsets": ...}]}``."""
    layers = []
    for entry in d["layers"]:
        unknown = set(entry) - {"kernel", "scope", "kernel_size", "kernel_offsets", "data_offsets"}
        if unknown:
            raise ValueError(f"unknown stack layer keys {sorted(unknown)}")
        arr = {k: np.asarray(v, float) for k, v in entry.items() if k != "kernel_size"}
        layers.append(StackLayer(kernel_size=entry.get("kernel_size"), **arr))
    return LinearStack(layers), bool(d.get("relu", False))


def stack_to_dict(stack: LinearStack, relu: bool = False) -> dict:
    out = []
    for l in stack.layers:
        entry = {"kernel_size": l.kernel_size}
        for name in ("kernel", "scope", "kernel_offsets", "data_offsets"):
            value = getattr(l, name)
            if value is not None:
                entry[name] = np.asarray(value).tolist()
        out.append(entry)
    return {"relu": relu, "layers": out}


def load_stack(path) -> tuple[LinearStack, bool]:
    with open(path) as fh:
        return stack_from_dict(json.load(fh))


def _layer_arrays(layer: StackLayer):
    vals = layer.tap_values().ravel()
    atoms = layer.atoms()
    dy = np.array([a[1] for a in atoms], dtype=np.int64)
    dx = np.array([a[2] for a in atoms], dtype=np.int64)
    v = np.array([vals[a[0]] * a[3] for a in atoms])
    return dy, dx, v


def _paths(layers):
    """Yield (dy, dx, value) arrays covering every path through ``layers``, one
    entry per kernel-position tuple (no merging of equal displacements)."""
    arrays = [_layer_arrays(l) for l in layers]
    if not arrays:
        yield np.zeros(1, np.int64), np.zeros(1, np.int64), np.ones(1)
        return
    # split off leading layers until the remaining tail fits in one chunk
    split = 0
    while split < len(arrays) and int(np.prod([len(a[2]) for a in arrays[split:]])) > _CHUNK:
        split += 1
    head, tail = arrays[:split], arrays[split:]

    tdy, tdx, tv = np.zeros(1, np.int64), np.zeros(1, np.int64), np.ones(1)
    for dy, dx, v in tail:
        tdy = (tdy[:, None] + dy[None, :]).ravel()
        tdx = (tdx[:, None] + dx[None, :]).ravel()
        tv = (tv[:, None] * v[None, :]).ravel()
    for combo in itertools.product(*(range(len(a[2])) for a in head)):
        hy = sum(int(a[0][c]) for a, c in zip(head, combo))
        hx = sum(int(a[1][c]) for a, c in zip(head, combo))
        hv = float(np.prod([a[2][c] for a, c in zip(head, combo)]))
        yield tdy + hy, tdx + hx, tv * hv


def _guard(stack: LinearStack, skip=None):
    count = stack.path_count(skip)
    if count > PATH_GUARD:
        raise IntractableError(f"{count} paths exceed the enumeration guard of {PATH_GUARD}")


def _displacement_field_paths(layers, reach: int) -> np.ndarray:
    size = 2 * reach + 1
    field_ = np.zeros(size * size)
    for dy, dx, v in _paths(layers):
        np.add.at(field_, (dy + reach) * size + (dx + reach), v)
    return field_.reshape(size, size)


def _displacement_field_dp(layers, reach: int) -> np.ndarray:
    """Same field by folding one layer at a time (shift-and-add convolution)."""
    size = 2 * reach + 1
    dist = np.zeros((size, size))
    dist[reach, reach] = 1.0
    for layer in layers:
        dy, dx, v = _layer_arrays(layer)
        nxt = np.zeros_like(dist)
        for a, b, w in zip(dy, dx, v):
            src = dist[max(0, -a) : size - max(0, a), max(0, -b) : size - max(0, b)]
            nxt[max(0, a) : size - max(0, -a), max(0, b) : size - max(0, -b)] += w * src
        dist = nxt
    return dist


def displacement_field(stack: LinearStack, method: str = "auto", skip: int | None = None) -> np.ndarray:
    """R as a function of ``i - j``: array of side ``2r + 1`` centred on zero
    displacement. ``skip`` leaves one layer out (used for pinned ERFs)."""
    layers = [l for s, l in enumerate(stack.layers) if s != skip]
    reach = max(sum(l.reach() for l in layers), 0)
    if method == "paths" or (method == "auto" and stack.path_count(skip) <= PATH_GUARD):
        _guard(stack, skip)
        return _displacement_field_paths(layers, reach)
    if method in ("dp", "auto"):
        return _displacement_field_dp(layers, reach)
    raise ValueError(f"unknown method {method!r}")


def _lookup(fld: np.ndarray, dy: int, dx: int) -> float:
    r = fld.shape[0] // 2
    if abs(dy) > r or abs(dx) > r:
        return 0.0
    return float(fld[dy + r, dx + r])


def erf_enumerate(stack: LinearStack, i, j, method: str = "paths") -> float:
    """R(i; j) by summing kernel products over all paths reaching ``i`` from ``j``."""
    if method == "paths":
        _guard(stack)
        ty, tx = i[0] - j[0], i[1] - j[1]
        total = 0.0
        for dy, dx, v in _paths(stack.layers):
            total += float(v[(dy == ty) & (dx == tx)].sum())
        return total
    return _lookup(displacement_field(stack, method), i[0] - j[0], i[1] - j[1])


def erf_enumerate_map(stack: LinearStack, j, shape, method: str = "auto") -> np.ndarray:
    """Whole ERF over an input plane of ``shape`` for output coordinate ``j``."""
    fld = displacement_field(stack, method)
    r = fld.shape[0] // 2
    out = np.zeros(shape)
    h, w = shape
    y0, x0 = j[0] - r, j[1] - r
    ys, xs = slice(max(0, y0), min(h, y0 + 2 * r + 1)), slice(max(0, x0), min(w, x0 + 2 * r + 1))
    out[ys, xs] = fld[ys.start - y0 : ys.stop - y0, xs.start - x0 : xs.stop - x0]
    return out


def _tap_index(layer: StackLayer, k) -> int:
    c = layer.kernel_size // 2
    ty, tx = k[0] + c, k[1] + c
    if not (0 <= ty < layer.kernel_size and 0 <= tx < layer.kernel_size):
        raise ValueError(f"tap {k} outside a {layer.kernel_size}x{layer.kernel_size} kernel")
    return ty * layer.kernel_size + tx


def _pinned_layer(stack, m):
    if not 1 <= m <= stack.depth:
        raise ValueError(f"layer index m={m} outside [1, {stack.depth}]")
    return stack.layers[m - 1]


def erf_enumerate_pinned(stack: LinearStack, i, j, m: int, k_tilde) -> float:
    """ERF with layer ``m`` (1-based) collapsed to the 1x1 kernel holding its
    value at centred tap ``k_tilde``: paths run over the other layers only."""
    layer = _pinned_layer(stack, m)
    value = float(layer.tap_values().ravel()[_tap_index(layer, k_tilde)])
    _guard(stack, skip=m - 1)
    ty, tx = i[0] - j[0], i[1] - j[1]
    total = 0.0
    others = [l for s, l in enumerate(stack.layers) if s != m - 1]
    for dy, dx, v in _paths(others):
        total += float(v[(dy == ty) & (dx == tx)].sum())
    return total * value


def _decomposed(stack: LinearStack, i, j, m: int) -> float:
    """sum over layer-m taps of the pinned ERF at the output shifted by that
    tap's (possibly data-offset, bilinearly spread) displacement."""
    layer = _pinned_layer(stack, m)
    fld = displacement_field(stack, "paths", skip=m - 1)
    vals = layer.tap_values().ravel()
    total = 0.0
    for t, dy, dx, w in layer.atoms():
        pinned = vals[t] * _lookup(fld, i[0] - (j[0] + dy), i[1] - (j[1] + dx))
        total += w * pinned
    return total


def erf_decompose_check(stack: LinearStack, i, j, m: int | None = None):
    """Compare R(i; j) with its split over the taps of layer ``m`` (default: last).

    Returns (lhs, rhs, |lhs - rhs|).
    """
    m = stack.depth if m is None else m
    layer = _pinned_layer(stack, m)
    c = layer.kernel_size // 2
    lhs = erf_enumerate(stack, i, j)
    rhs = 0.0
    for t, dy, dx, w in layer.atoms():
        ty, tx = divmod(t, layer.kernel_size)
        rhs += w * erf_enumerate_pinned(stack, i, (j[0] + dy, j[1] + dx), m, (ty - c, tx - c))
    return lhs, rhs, abs(lhs - rhs)


def erf_dk(stack: LinearStack, i, j, m: int | None = None) -> float:
    """ERF of a stack of deformable kernels, split over the resampled taps of layer m."""
    if any(l.data_offsets is not None for l in stack.layers):
        raise ValueError("erf_dk takes kernel offsets only; use erf_dcdk")
    return _decomposed(stack, i, j, stack.depth if m is None else m)


def erf_dc(stack: LinearStack, i, j, m: int | None = None) -> float:
    """ERF of a stack with data offsets, split over the shifted taps of layer m."""
    if any(l.deformable_kernel for l in stack.layers):
        raise ValueError("erf_dc takes data offsets only; use erf_dcdk")
    return _decomposed(stack, i, j, stack.depth if m is None else m)


def erf_dcdk(stack: LinearStack, i, j, m: int | None = None) -> float:
    return _decomposed(stack, i, j, stack.depth if m is None else m)


# -- backprop ERFs ---------------------------------------------------------------

@dataclass
class GatingTrace:
    """Which ReLU units fired, one boolean mask per ReLU layer."""

    masks: list[np.ndarray]

    def active_fraction(self) -> list[float]:
        return [float(m.mean()) for m in self.masks]


@dataclass
class ErfMap:
    output_coord: tuple[int, int]
    values: np.ndarray
    network_depth: int
    rf_half_width: int | None = None
    input_center: tuple[int, int] | None = None  # where j sits on the input grid
    gating: GatingTrace | None = field(default=None, repr=False)

    def support(self, rel_threshold: float = 0.0) -> np.ndarray:
        mag = np.abs(self.values)
        if rel_threshold == 0.0:
            return mag > 0
        return mag > rel_threshold * mag.max()


def stack_to_graph(stack: LinearStack, relu: bool = False) -> ModelGraph:
    """Single-channel same-padded network computing the stack's forward pass.

    Deformable layers are real :class:`Deform` layers whose offset generators
    have zero weights and a bias equal to the fixed offsets.
    """
    layers = []
    for layer in stack.layers:
        k = layer.kernel_size
        spec = ConvSpec(k, 1, 1, 1, k // 2, depthwise=True)
        if not layer.deformable_kernel and layer.data_offsets is None:
            layers.append(Conv(spec, np.asarray(layer.kernel, float)[None, None]))
        else:
            if layer.deformable_kernel and layer.data_offsets is not None:
                kind = "dcdk"
            elif layer.deformable_kernel:
                kind = "dk_global"
            else:
                kind = "dc"
            weights = layer.scope if layer.deformable_kernel else layer.kernel
            d = Deform(kind, spec, np.array(weights, float)[None, None])
            if layer.deformable_kernel:
                koff = layer.kernel_offsets if layer.kernel_offsets is not None else np.zeros((k * k, 2))
                d.params["kgen_bias"] = np.asarray(koff, float).ravel().copy()
            if layer.data_offsets is not None:
                d.params["dgen_bias"] = np.asarray(layer.data_offsets, float).ravel().copy()
            layers.append(d)
        if relu:
            layers.append(ReLU())
    return ModelGraph(layers, arch="stack", meta={"rf_half_width": stack.rf_half_width()})


def receptive_half_width(net: ModelGraph) -> int:
    """Theoretical receptive-field half width of the conv layers (strides included)."""
    r, jump = 0, 1
    for layer in net.layers:
        spec = getattr(layer, "spec", None)
        if spec is None:
            continue
        if layer.kind in ("dc", "dcdk"):
            return None  # data offsets are unbounded
        r += (spec.kernel_size // 2) * jump
        jump *= spec.stride
    return r


def input_center(net: ModelGraph, j) -> tuple[int, int]:
    """Map an output coordinate back to the input pixel at its kernel centre."""
    y, x = j
    for layer in reversed(net.layers):
        spec = getattr(layer, "spec", None)
        if spec is None:
            continue
        off = spec.kernel_size // 2 - spec.padding
        y, x = y * spec.stride + off, x * spec.stride + off
    return int(y), int(x)


def erf_backprop(net: ModelGraph, x: np.ndarray, j, channel: int | None = 0) -> ErfMap:
    """d out[channel, j] / d input for a single image, summed over input channels.

    ``channel=None`` differentiates the sum of all output channels at ``j``.
    """
    if x.ndim == 3:
        x = x[None]
    x = x[:1]
    out = net.forward(x)
    ho, wo = out.shape[2:]
    if not (0 <= j[0] < ho and 0 <= j[1] < wo):
        raise IndexError(f"output coordinate {tuple(j)} outside {ho}x{wo}")
    g = np.zeros_like(out)
    g[0, slice(None) if channel is None else channel, j[0], j[1]] = 1.0
    gx = net.backward(g)
    masks = [l.mask[0].copy() for l in net.layers if isinstance(l, ReLU)]
    depth = sum(1 for l in net.layers if hasattr(l, "spec"))
    rf = net.meta.get("rf_half_width", receptive_half_width(net))
    return ErfMap((int(j[0]), int(j[1])), gx[0].sum(axis=0).astype(np.float64), depth, rf,
                  input_center(net, j), GatingTrace(masks) if masks else None)


# -- statistics and export -------------------------------------------------------------

@dataclass
class ErfStats:
    mass_center: tuple[float, float]
    second_moment: float  # |value|-weighted mean squared distance from the centre
    covariance: np.ndarray
    support_area: int
    density: float


def erf_stats(erf: ErfMap, rel_threshold: float = 1e-3) -> ErfStats:
    mag = np.abs(erf.values)
    total = mag.sum()
    if total == 0:
        raise ValueError("ERF map is identically zero")
    h, w = mag.shape
    ys, xs = np.mgrid[0:h, 0:w]
    cy, cx = (mag * ys).sum() / total, (mag * xs).sum() / total
    dy, dx = ys - cy, xs - cx
    cov = np.array([[(mag * dy * dy).sum(), (mag * dy * dx).sum()],
                    [(mag * dy * dx).sum(), (mag * dx * dx).sum()]]) / total
    support = int((mag > rel_threshold * mag.max()).sum())
    r = erf.rf_half_width
    if r is None:
        box = h * w
    else:
        c = erf.input_center or erf.output_coord
        y0, y1 = max(0, c[0] - r), min(h, c[0] + r + 1)
        x0, x1 = max(0, c[1] - r), min(w, c[1] + r + 1)
        box = max((y1 - y0) * (x1 - x0), 1)
    return ErfStats((float(cy), float(cx)), float(cov[0, 0] + cov[1, 1]), cov, support, support / box)


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary PGM of max-normalised magnitudes."""
    mag = np.abs(np.asarray(values, float))
    peak = mag.max()
    img = np.zeros(mag.shape, np.uint8) if peak == 0 else np.round(255 * mag / peak).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], np.uint8).reshape(h, w)


def export_erf(erf: ErfMap, prefix) -> tuple[str, str]:
    pgm, tsr = f"{prefix}.pgm", f"{prefix}.tsr"
    write_pgm(pgm, erf.values)
    write_tsr(tsr, erf.values[None, None])
    return pgm, tsr
