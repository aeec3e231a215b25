"""Dense NCHW tensors and the handful of primitives the operators share.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out as
(batch, channels, height, width) in C order. float64 is the default dtype;
float32 is used by the training harness.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

DEFAULT_DTYPE = np.float64
_MAX_ELEMENTS = 2**40
_DTYPES = {"float64": np.float64, "float32": np.float32}


def tensor_new(dims, fill: float = 0.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4:
        raise ValueError(f"expected 4 dims (N, C, H, W), got {dims}")
    if any(d < 0 for d in dims):
        raise ValueError(f"negative dimension in {dims}")
    if int(np.prod(dims, dtype=object)) > _MAX_ELEMENTS:
        raise OverflowError(f"tensor of dims {dims} is too large")
    return np.full(dims, fill, dtype=dtype)


def as_tensor(data, dtype=None) -> np.ndarray:
    """Validate external data as a rank-4 finite tensor (copying into C order)."""
    arr = np.array(data, dtype=dtype or DEFAULT_DTYPE, order="C")
    if arr.ndim != 4:
        raise ValueError(f"expected a rank-4 tensor, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def relu(t: np.ndarray) -> np.ndarray:
    return np.maximum(t, 0)


def global_avg_pool(t: np.ndarray) -> np.ndarray:
    n, c, h, w = t.shape
    if h < 1 or w < 1:
        raise ValueError("global_avg_pool needs a non-empty spatial plane")
    return t.reshape(n, c, h * w).mean(axis=2).reshape(n, c, 1, 1)


def global_avg_pool_backward(upstream: np.ndarray, shape) -> np.ndarray:
    n, c, h, w = shape
    g = upstream.reshape(n, c, 1, 1) / (h * w)
    return np.broadcast_to(g, shape).astype(upstream.dtype, copy=True)


def fully_connected(t: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map (N, C, 1, 1) -> (N, M, 1, 1) with ``weights`` of shape (M, C)."""
    n, c = t.shape[:2]
    if t.shape[2:] != (1, 1):
        raise ValueError(f"fully_connected expects (N, C, 1, 1), got {t.shape}")
    m = weights.shape[0]
    if weights.shape != (m, c) or bias.shape != (m,):
        raise ValueError(
            f"weights {weights.shape} / bias {bias.shape} do not map {c} -> {m}"
        )
    # row-wise products and reductions keep each item independent of batch size
    out = (t.reshape(n, 1, c) * weights[None]).sum(axis=2) + bias
    return out.reshape(n, m, 1, 1)


def fully_connected_backward(t, weights, upstream):
    """Return (grad_input, grad_weights, grad_bias) for :func:`fully_connected`."""
    n, c = t.shape[:2]
    g = upstream.reshape(n, -1)
    x = t.reshape(n, c)
    return (g @ weights).reshape(t.shape), g.T @ x, g.sum(axis=0)


# -- raw tensor files --------------------------------------------------------

def write_tsr(path, t: np.ndarray) -> None:
    """Write ``t`` as a JSON header line followed by little-endian floats."""
    t = np.asarray(t)
    dtype = np.dtype(t.dtype).name
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype}")
    header = {"dims": list(t.shape), "dtype": dtype, "byte_order": "little"}
    payload = np.ascontiguousarray(t, dtype=np.dtype(dtype).newbyteorder("<"))
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("ascii") + b"\n")
        fh.write(payload.tobytes(order="C"))


def read_tsr(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    line, _, payload = raw.partition(b"\n")
    header = json.loads(line)
    if header.get("byte_order") != "little":
        raise ValueError("only little-endian .tsr payloads are supported")
    dtype = np.dtype(_DTYPES[header["dtype"]]).newbyteorder("<")
    dims = tuple(header["dims"])
    arr = np.frombuffer(payload, dtype=dtype)
    if arr.size != int(np.prod(dims)):
        raise ValueError(f"payload holds {arr.size} values, header says {dims}")
    return arr.reshape(dims).astype(_DTYPES[header["dtype"]])
