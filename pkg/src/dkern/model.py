"""Layer stack with hand-written reverse mode.

A :class:`ModelGraph` is an ordered list of layers. Each layer keeps what it
needs from ``forward`` to run ``backward`` and accumulates parameter gradients
into ``layer.grads``. Layer kinds: rigid, dk_global, dk_local, dc, dcdk, relu,
pool (global average) and fc.
"""
from __future__ import annotations

import numpy as np

from .conv import ConvSpec, KernelScope
from .deform import OffsetGeneratorGlobal, OffsetGeneratorLocal, deform_conv, deform_conv_backward
from .tensor import (
    fully_connected,
    fully_connected_backward,
    global_avg_pool,
    global_avg_pool_backward,
    relu,
)

DEFORM_KINDS = ("dk_global", "dk_local", "dc", "dcdk")
CONV_KINDS = ("rigid",) + DEFORM_KINDS


def _spec_dict(spec: ConvSpec) -> dict:
    return {
        "kernel_size": spec.kernel_size,
        "in_channels": spec.in_channels,
        "out_channels": spec.out_channels,
        "stride": spec.stride,
        "padding": spec.padding,
        "depthwise": spec.depthwise,
    }


class Layer:
    kind = ""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.lr_mult: dict[str, float] = {}
        self.no_decay: set[str] = set()

    def describe(self) -> dict:
        return {"kind": self.kind}

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


class Conv(Layer):
    """Rigid convolution (optionally with a per-channel bias)."""

    kind = "rigid"

    def __init__(self, spec: ConvSpec, weight: np.ndarray, bias: np.ndarray | None = None):
        super().__init__()
        self.spec = spec
        self.params["weight"] = weight
        if bias is not None:
            self.params["bias"] = bias
            self.no_decay.add("bias")

    def describe(self):
        return {"kind": self.kind, "spec": _spec_dict(self.spec), "bias": "bias" in self.params}

    def forward(self, x):
        scope = KernelScope.rigid(self.params["weight"], self.spec.depthwise)
        out, self._cache = deform_conv(x, scope, self.spec)
        if "bias" in self.params:
            out = out + self.params["bias"][None, :, None, None]
        return out

    def backward(self, g):
        grads = deform_conv_backward(self._cache, g)
        self.grads["weight"] = grads["weights"]
        if "bias" in self.params:
            self.grads["bias"] = g.sum(axis=(0, 2, 3))
        return grads["input"]


class Deform(Layer):
    """Deformable kernel / deformable convolution / both, with offset generators.

    Kernel offsets come from a global (pool + linear) or local (conv)
    generator; data offsets always come from a local generator. Generator
    parameters carry ``lr_multiplier``.
    """

    def __init__(self, kind: str, spec: ConvSpec, scope_weights: np.ndarray, lr_multiplier: float = 1e-2):
        super().__init__()
        if kind not in DEFORM_KINDS:
            raise ValueError(f"unknown deformable kind {kind!r}")
        self.kind = kind
        self.spec = spec
        self.lr_multiplier = lr_multiplier
        dtype = scope_weights.dtype
        self.params["scope"] = scope_weights
        k = spec.kernel_size
        if kind == "dk_global":
            g = OffsetGeneratorGlobal.zeros(spec.in_channels, k, dtype)
            self.params["kgen_weight"], self.params["kgen_bias"] = g.weights, g.bias
        elif kind in ("dk_local", "dcdk"):
            g = OffsetGeneratorLocal.for_target(spec, dtype)
            self.params["kgen_weight"], self.params["kgen_bias"] = g.weights, g.bias
        if kind in ("dc", "dcdk"):
            g = OffsetGeneratorLocal.for_target(spec, dtype)
            self.params["dgen_weight"], self.params["dgen_bias"] = g.weights, g.bias
        for name in self.params:
            if "gen_" in name:
                self.lr_mult[name] = lr_multiplier
        self.no_decay.update(n for n in self.params if n.endswith("_bias"))
        self.last_kernel_offsets = None
        self.last_data_offsets = None

    @property
    def scope(self) -> KernelScope:
        return KernelScope(self.params["scope"], self.spec.kernel_size, self.spec.depthwise)

    @property
    def scope_size(self) -> int:
        return self.params["scope"].shape[-1]

    def describe(self):
        return {
            "kind": self.kind,
            "spec": _spec_dict(self.spec),
            "scope_size": self.scope_size,
            "lr_multiplier": self.lr_multiplier,
        }

    def kernel_generator(self):
        w, b = self.params.get("kgen_weight"), self.params.get("kgen_bias")
        if w is None:
            return None
        if self.kind == "dk_global":
            return OffsetGeneratorGlobal(w, b)
        return OffsetGeneratorLocal(w, b, OffsetGeneratorLocal.for_target(self.spec).spec)

    def data_generator(self):
        w, b = self.params.get("dgen_weight"), self.params.get("dgen_bias")
        if w is None:
            return None
        return OffsetGeneratorLocal(w, b, OffsetGeneratorLocal.for_target(self.spec).spec)

    def forward(self, x):
        self._x = x
        kgen, dgen = self.kernel_generator(), self.data_generator()
        koff = kgen(x) if kgen else None
        doff = dgen(x) if dgen else None
        out, self._cache = deform_conv(x, self.scope, self.spec, koff, doff)
        self.last_kernel_offsets = None if koff is None else self._cache["clipped"]
        self.last_data_offsets = doff
        return out

    def backward(self, g):
        grads = deform_conv_backward(self._cache, g)
        self.grads["scope"] = grads["weights"]
        gx = grads["input"]
        for prefix, gen, key in (("kgen", self.kernel_generator(), "kernel_offsets"),
                                 ("dgen", self.data_generator(), "data_offsets")):
            if gen is None:
                continue
            gxg, gp = gen.backward(self._x, grads[key])
            self.grads[f"{prefix}_weight"] = gp["weights"]
            self.grads[f"{prefix}_bias"] = gp["bias"]
            gx = gx + gxg
        return gx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self.mask = x > 0
        return relu(x)

    def backward(self, g):
        return g * self.mask


class GlobalPool(Layer):
    kind = "pool"

    def forward(self, x):
        self._shape = x.shape
        return global_avg_pool(x)

    def backward(self, g):
        return global_avg_pool_backward(g, self._shape)


class FC(Layer):
    kind = "fc"

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        super().__init__()
        self.params["weight"], self.params["bias"] = weight, bias
        self.no_decay.add("bias")

    def describe(self):
        m, c = self.params["weight"].shape
        return {"kind": self.kind, "in_features": c, "out_features": m}

    def forward(self, x):
        self._x = x
        return fully_connected(x, self.params["weight"], self.params["bias"])

    def backward(self, g):
        gx, gw, gb = fully_connected_backward(self._x, self.params["weight"], g)
        self.grads["weight"], self.grads["bias"] = gw, gb
        return gx


class ModelGraph:
    def __init__(self, layers, arch: str = "custom", meta: dict | None = None):
        self.layers = list(layers)
        self.arch = arch
        self.meta = dict(meta or {})

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                yield f"{i}.{name}", layer, name, value

    def state(self) -> dict[str, np.ndarray]:
        return {full: value for full, _, _, value in self.named_params()}

    def load_state(self, state: dict[str, np.ndarray]):
        for full, layer, name, value in self.named_params():
            arr = state[full]
            if arr.shape != value.shape:
                raise ValueError(f"parameter {full}: shape {arr.shape} != {value.shape}")
            layer.params[name] = arr.astype(value.dtype)

    def describe(self) -> dict:
        return {"arch": self.arch, "meta": self.meta, "layers": [l.describe() for l in self.layers]}

    @property
    def deform_layers(self):
        return [l for l in self.layers if isinstance(l, Deform)]

    def validate(self):
        """Check that the graph ends in exactly one classification head."""
        heads = [i for i, l in enumerate(self.layers) if l.kind == "fc"]
        if len(heads) != 1 or heads[0] != len(self.layers) - 1:
            raise ValueError("a classifier needs exactly one fc head, as the last layer")

    @classmethod
    def from_description(cls, desc: dict, dtype=np.float64) -> "ModelGraph":
        """Rebuild the layer structure (parameters zeroed) from :meth:`describe`."""
        layers = []
        for d in desc["layers"]:
            kind = d["kind"]
            if kind in CONV_KINDS:
                spec = ConvSpec(**d["spec"])
            if kind == "rigid":
                shape = spec.weight_shape + (spec.kernel_size,) * 2
                bias = np.zeros(spec.out_channels, dtype) if d.get("bias") else None
                layers.append(Conv(spec, np.zeros(shape, dtype), bias))
            elif kind in DEFORM_KINDS:
                shape = spec.weight_shape + (d["scope_size"],) * 2
                layers.append(Deform(kind, spec, np.zeros(shape, dtype), d["lr_multiplier"]))
            elif kind == "relu":
                layers.append(ReLU())
            elif kind == "pool":
                layers.append(GlobalPool())
            elif kind == "fc":
                m, c = d["out_features"], d["in_features"]
                layers.append(FC(np.zeros((m, c), dtype), np.zeros(m, dtype)))
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return cls(layers, desc.get("arch", "custom"), desc.get("meta"))


# -- classification network ---------------------------------------------------

ARCHS = ("rigid", "dk_global", "dk_local", "dc", "dcdk")


def normalize_arch(name: str) -> str:
    arch = name.replace("-", "_")
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {name!r}; choose from {', '.join(ARCHS)}")
    return arch


def build_classifier(
    arch: str,
    n_classes: int = 4,
    in_channels: int = 1,
    widths=(16, 32, 64, 64),
    strides=(2, 1, 2, 1),
    deform_blocks=(2, 3),
    scope_size: int = 4,
    lr_multiplier: float = 1e-2,
    seed: int = 0,
    dtype=np.float32,
) -> ModelGraph:
    """Stem conv, depthwise-separable blocks, global pool and a linear head.

    Each block is a 3x3 depthwise convolution (deformable in ``deform_blocks``
    unless ``arch`` is rigid), a 1x1 pointwise convolution and a ReLU.
    """
    arch = normalize_arch(arch)
    rng = np.random.default_rng(seed)

    def normal(shape, fan_in, gain=2.0):
        return (rng.normal(size=shape) * np.sqrt(gain / fan_in)).astype(dtype)

    stem = ConvSpec(3, in_channels, widths[0], 1, 1)
    layers = [Conv(stem, normal((widths[0], in_channels, 3, 3), 9 * in_channels), np.zeros(widths[0], dtype)), ReLU()]
    c = widths[0]
    for b, (width, stride) in enumerate(zip(widths, strides)):
        dw = ConvSpec(3, c, c, stride, 1, depthwise=True)
        if arch != "rigid" and b in deform_blocks:
            ks = 3 if arch == "dc" else scope_size
            layers.append(Deform(arch, dw, normal((c, 1, ks, ks), 9, gain=1.0), lr_multiplier))
        else:
            layers.append(Conv(dw, normal((c, 1, 3, 3), 9, gain=1.0)))
        pw = ConvSpec(1, c, width)
        layers += [Conv(pw, normal((width, c, 1, 1), c), np.zeros(width, dtype)), ReLU()]
        c = width
    layers += [GlobalPool(), FC(normal((n_classes, c), c, gain=1.0), np.zeros(n_classes, dtype))]
    meta = {
        "n_classes": n_classes,
        "in_channels": in_channels,
        "widths": list(widths),
        "strides": list(strides),
        "deform_blocks": list(deform_blocks),
        "scope_size": scope_size,
        "lr_multiplier": lr_multiplier,
        "seed": seed,
    }
    model = ModelGraph(layers, arch, meta)
    model.validate()
    return model


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient; ``logits`` is (N, M) or (N, M, 1, 1)."""
    shape = logits.shape
    z = logits.reshape(shape[0], -1).astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1
    return float(loss), (g / n).astype(logits.dtype).reshape(shape)


def model_gradcheck_case(rng):
    """Tiny classifier with every layer kind; returns (f, flat params, analytic grad)."""
    spec = ConvSpec(3, 1, 1, 1, 1, depthwise=True)
    layers = [
        Conv(ConvSpec(3, 1, 1, 1, 1), rng.normal(size=(1, 1, 3, 3)), rng.normal(size=1) * 0.1),
        ReLU(),
        Deform("dk_local", spec, rng.normal(size=(1, 1, 4, 4))),
        Deform("dc", spec, rng.normal(size=(1, 1, 3, 3))),
        Deform("dk_global", spec, rng.normal(size=(1, 1, 4, 4))),
        Deform("dcdk", spec, rng.normal(size=(1, 1, 4, 4))),
        Conv(ConvSpec(1, 1, 3), rng.normal(size=(3, 1, 1, 1)), rng.normal(size=3) * 0.1),
        ReLU(),
        GlobalPool(),
        FC(rng.normal(size=(3, 3)), rng.normal(size=3)),
    ]
    model = ModelGraph(layers)
    for layer in model.deform_layers:
        for name in layer.params:
            if "gen_" in name:
                layer.params[name] = rng.normal(scale=0.1, size=layer.params[name].shape)
    x = rng.normal(size=(2, 1, 4, 4))
    labels = np.array([0, 2])
    names = [full for full, *_ in model.named_params()]
    shapes = [v.shape for *_, v in model.named_params()]

    def unpack(p):
        out, i = {}, 0
        for name, shape in zip(names, shapes):
            size = int(np.prod(shape))
            out[name] = p[i : i + size].reshape(shape)
            i += size
        return out

    def f(p):
        model.load_state(unpack(p))
        return softmax_cross_entropy(model.forward(x), labels)[0]

    params = np.concatenate([v.ravel() for *_, v in model.named_params()])
    _, g = softmax_cross_entropy(model.forward(x), labels)
    model.backward(g)
    analytic = np.concatenate([layer.grads[name].ravel() for _, layer, name, _ in model.named_params()])
    return f, params, analytic
