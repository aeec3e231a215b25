"""Desk-scale training: config, SGD with momentum, schedule, checkpoints, metrics."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from .data import gen_dataset, to_arrays
from .conv import ConvSpec
from .model import FC, Deform, GlobalPool, ModelGraph, build_classifier, normalize_arch, softmax_cross_entropy
from .tensor import read_tsr, write_tsr

DTYPES = {"float32": np.float32, "float64": np.float64}
METRIC_HEADER = ("epoch", "split", "accuracy", "loss", "mean_offset_mag")


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 4e-5
    warmup_epochs: float = 1.0
    schedule: str = "cosine"
    seed: int = 0
    dk_lr_multiplier: float = 1e-2
    scope_size: int = 4
    n_train: int = 4000
    n_val: int = 1000
    canvas: int = 32
    data_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.n_train < 1 or self.n_val < 1:
            raise ValueError("batch_size, n_train and n_val must be positive")
        if self.base_lr < 0 or self.weight_decay < 0 or self.dk_lr_multiplier < 0:
            raise ValueError("learning rates and weight decay must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.warmup_epochs < 0 or (self.epochs > 0 and self.warmup_epochs >= self.epochs):
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {', '.join(DTYPES)}")
        if self.scope_size < 3:
            raise ValueError("scope_size must be >= the 3x3 kernel size")

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
        types = {f.name: f.type for f in fields(cls)}
        casts = {"int": int, "float": float, "str": str}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}", key)
            try:
                values[key] = casts[types[key]](value)
            except ValueError:
                raise ConfigError(f"bad value for {key!r}: {value!r}", key) from None
        try:
            return cls(**values)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


# -- optimisation --------------------------------------------------------------

def learning_rate(config: TrainConfig, epoch_fraction: float) -> float:
    """Linear warmup from zero, then cosine decay to zero at the last epoch."""
    base, w, e = config.base_lr, config.warmup_epochs, config.epochs
    if w > 0 and epoch_fraction < w:
        return base * epoch_fraction / w
    if config.schedule == "constant" or e <= w:
        return base
    t = min(max((epoch_fraction - w) / (e - w), 0.0), 1.0)
    return base * 0.5 * (1.0 + math.cos(math.pi * t))


def _lr_multiplier(layer, name: str, config: TrainConfig) -> float:
    if isinstance(layer, Deform) and "gen_" in name:
        return config.dk_lr_multiplier
    return layer.lr_mult.get(name, 1.0)


def apply_update(model: ModelGraph, config: TrainConfig, lr: float) -> None:
    """Momentum SGD on the gradients stored in the layers.

    v <- momentum * v + (g + wd * w);  w <- w - lr * multiplier * v.
    Weight decay skips biases (including offset-generator biases).
    """
    velocity = model.__dict__.setdefault("velocity", {})
    for full, layer, name, w in model.named_params():
        g = layer.grads[name]
        if config.weight_decay and name not in layer.no_decay and name != "bias":
            g = g + config.weight_decay * w
        v = velocity.get(full)
        v = g.copy() if v is None else config.momentum * v + g
        velocity[full] = v
        step = lr * _lr_multiplier(layer, name, config)
        if step:
            layer.params[name] = (w - step * v).astype(w.dtype)


def sgd_step(model: ModelGraph, batch, config: TrainConfig, epoch_fraction: float) -> float:
    """One forward/backward/update on ``batch = (images, labels)``; returns the loss."""
    x, y = batch
    logits = model.forward(x)
    loss, g = softmax_cross_entropy(logits, y)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss at epoch {epoch_fraction:.3f}")
    model.backward(g)
    apply_update(model, config, learning_rate(config, epoch_fraction))
    return loss


# -- evaluation ------------------------------------------------------------------

def last_kernel_offset_layer(model: ModelGraph):
    layers = [l for l in model.deform_layers if l.kind in ("dk_global", "dk_local", "dcdk")]
    return layers[-1] if layers else None


def _offset_magnitude(layer) -> np.ndarray:
    """Per-sample mean Euclidean offset norm from the layer's last forward pass."""
    off = layer.last_kernel_offsets
    if off is not None:
        return np.sqrt((off.astype(np.float64) ** 2).sum(-1)).mean(axis=(1, 2))
    doff = layer.last_data_offsets.astype(np.float64)
    n = doff.shape[0]
    doff = doff.reshape(n, -1, 2, *doff.shape[2:])
    return np.sqrt((doff**2).sum(2)).reshape(n, -1).mean(1)


def evaluate(model: ModelGraph, x, y, batch_size: int = 250):
    """(accuracy, mean loss, mean offset magnitude at the last deformable layer)."""
    correct, loss_sum, mags = 0, 0.0, []
    target = last_kernel_offset_layer(model) or (model.deform_layers[-1] if model.deform_layers else None)
    for s in range(0, len(y), batch_size):
        xb, yb = x[s : s + batch_size], y[s : s + batch_size]
        logits = model.forward(xb)
        loss, _ = softmax_cross_entropy(logits, yb)
        loss_sum += loss * len(yb)
        correct += int((logits.reshape(len(yb), -1).argmax(1) == yb).sum())
        if target is not None:
            mags.append(_offset_magnitude(target))
    mag = float(np.concatenate(mags).mean()) if mags else 0.0
    return correct / len(y), loss_sum / len(y), mag


@dataclass
class OffsetScaleCorrelation:
    rho: float  # nan when undefined
    n: int

    @property
    def defined(self) -> bool:
        return not math.isnan(self.rho)

    @property
    def magnitude(self) -> float:
        """|rho|, with an undefined correlation counted as zero."""
        return abs(self.rho) if self.defined else 0.0


def per_sample_offset_magnitude(model: ModelGraph, x, batch_size: int = 250) -> np.ndarray:
    layer = last_kernel_offset_layer(model)
    if layer is None:
        raise ValueError("model has no deformable-kernel layer")
    out = []
    for s in range(0, len(x), batch_size):
        model.forward(x[s : s + batch_size])
        out.append(_offset_magnitude(layer))
    return np.concatenate(out)


def offset_scale_correlation(model: ModelGraph, samples, dtype=None) -> OffsetScaleCorrelation:
    """Spearman rank correlation between per-sample mean |offset| at the last
    deformable-kernel layer and the ground-truth object scale."""
    dtype = dtype or model.layers[0].params[next(iter(model.layers[0].params))].dtype
    x, _, scales = to_arrays(samples, dtype)
    mags = per_sample_offset_magnitude(model, x)
    if np.ptp(mags) == 0 or np.ptp(scales) == 0:
        return OffsetScaleCorrelation(float("nan"), len(mags))
    return OffsetScaleCorrelation(float(spearmanr(mags, scales).statistic), len(mags))


def positive_control_model(gain: float = 4.0, scope_size: int = 4, dtype=np.float64) -> ModelGraph:
    """A global DK on the raw image whose offsets are ``gain * mean intensity``.

    Every shape class has the same area at a given scale, so mean intensity
    and hence the offset magnitude grow monotonically with object scale.
    """
    spec = ConvSpec(3, 1, 1, 1, 1, depthwise=True)
    rng = np.random.default_rng(0)
    dk = Deform("dk_global", spec, rng.normal(size=(1, 1, scope_size, scope_size)).astype(dtype))
    w = np.zeros((18, 1), dtype)
    w[0::2] = gain  # push every tap along +x
    dk.params["kgen_weight"] = w
    head = FC(rng.normal(size=(4, 1)).astype(dtype), np.zeros(4, dtype))
    return ModelGraph([dk, GlobalPool(), head], arch="positive_control")


# -- training --------------------------------------------------------------------

@dataclass
class SplitData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray

    @classmethod
    def from_samples(cls, train, val, dtype) -> "SplitData":
        xt, yt, _ = to_arrays(train, dtype)
        xv, yv, _ = to_arrays(val, dtype)
        return cls(xt, yt, xv, yv)


def make_data(config: TrainConfig):
    """Train and validation samples drawn from one seeded stream."""
    samples = gen_dataset(config.n_train + config.n_val, config.canvas, config.data_seed)
    return samples[: config.n_train], samples[config.n_train :]


def make_model(arch: str, config: TrainConfig) -> ModelGraph:
    return build_classifier(
        normalize_arch(arch),
        scope_size=config.scope_size,
        lr_multiplier=config.dk_lr_multiplier,
        seed=config.seed,
        dtype=config.np_dtype,
    )


def train(model_kind, dataset: SplitData, config: TrainConfig, progress=None):
    """Train a freshly built ``model_kind`` (or a given ModelGraph) on ``dataset``.

    Returns (model, log) where log rows carry the metric CSV fields. With
    ``epochs == 0`` the initial model and an empty log come back.
    """
    model = make_model(model_kind, config) if isinstance(model_kind, str) else model_kind
    log = []
    if config.epochs == 0:
        return model, log
    rng = np.random.default_rng(config.seed)
    acc, loss, mag = evaluate(model, dataset.x_val, dataset.y_val)
    log.append(dict(epoch=0, split="val", accuracy=acc, loss=loss, mean_offset_mag=mag))
    n = len(dataset.y_train)
    steps = math.ceil(n / config.batch_size)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses, correct, mags = [], 0, []
        target = last_kernel_offset_layer(model) or (model.deform_layers[-1] if model.deform_layers else None)
        for step in range(steps):
            idx = order[step * config.batch_size : (step + 1) * config.batch_size]
            xb, yb = dataset.x_train[idx], dataset.y_train[idx]
            logits = model.forward(xb)
            loss, g = softmax_cross_entropy(logits, yb)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss in epoch {epoch + 1}")
            correct += int((logits.reshape(len(yb), -1).argmax(1) == yb).sum())
            losses.append(loss * len(yb))
            if target is not None:
                mags.append(_offset_magnitude(target))
            model.backward(g)
            apply_update(model, config, learning_rate(config, epoch + step / steps))
        mag = float(np.concatenate(mags).mean()) if mags else 0.0
        log.append(dict(epoch=epoch + 1, split="train", accuracy=correct / n, loss=sum(losses) / n, mean_offset_mag=mag))
        acc, vloss, vmag = evaluate(model, dataset.x_val, dataset.y_val)
        log.append(dict(epoch=epoch + 1, split="val", accuracy=acc, loss=vloss, mean_offset_mag=vmag))
        if progress:
            progress(log[-2], log[-1])
    return model, log


# -- files -------------------------------------------------------------------------

def write_metrics(path, log) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_HEADER)
        for row in log:
            w.writerow([row["epoch"], row["split"], repr(float(row["accuracy"])),
                        repr(float(row["loss"])), repr(float(row["mean_offset_mag"]))])


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["epoch"] = int(r["epoch"])
        for k in ("accuracy", "loss", "mean_offset_mag"):
            r[k] = float(r[k])
    return rows


def save_checkpoint(directory, model: ModelGraph, config: TrainConfig, epoch: int) -> Path:
    """JSON manifest plus one ``.tsr`` file per parameter tensor."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    params = {}
    for full, _, _, value in model.named_params():
        rel = f"params/{full}.tsr"
        arr = value.reshape((1,) * (4 - value.ndim) + value.shape) if value.ndim < 4 else value
        write_tsr(directory / rel, arr)
        params[full] = {"file": rel, "shape": list(value.shape)}
    manifest = {
        "format": "dkern-checkpoint",
        "version": __version__,
        "arch": model.arch,
        "model": model.describe(),
        "config": asdict(config),
        "epoch": epoch,
        "params": params,
    }
    path = directory / "checkpoint.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    """Return (model, config, epoch) from a checkpoint directory or manifest path."""
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.json"
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "dkern-checkpoint":
        raise ValueError(f"{path} is not a checkpoint manifest")
    config = TrainConfig(**manifest["config"])
    model = ModelGraph.from_description(manifest["model"], config.np_dtype)
    state = {}
    for full, entry in manifest["params"].items():
        state[full] = read_tsr(path.parent / entry["file"]).reshape(entry["shape"])
    model.load_state(state)
    return model, config, manifest["epoch"]


def set_threads_from_env():
    """Cap BLAS threads to DK_NUM_THREADS (default 1) for reproducible runs."""
    from threadpoolctl import threadpool_limits

    n = int(os.environ.get("DK_NUM_THREADS", "1"))
    if n < 1:
        raise ValueError("DK_NUM_THREADS must be >= 1")
    return threadpool_limits(limits=n)
