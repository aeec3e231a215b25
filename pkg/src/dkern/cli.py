"""Command-line front end: dataset, train, gradcheck, erf, inspect, replay.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
Every command that produces files writes a ``manifest.json`` run manifest
next to them; ``dkern replay`` re-runs it.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import erf as erflab
from .data import CLASSES, gen_dataset, render_shape
from .gradcheck import REGISTRY, gradcheck_op
from .model import ModelGraph, normalize_arch
from .tensor import read_tsr, write_tsr
from .train import (
    ConfigError,
    SplitData,
    TrainConfig,
    evaluate,
    load_checkpoint,
    make_data,
    save_checkpoint,
    set_threads_from_env,
    train,
    write_metrics,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
ERF_AGREEMENT_TOL = 1e-10


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    version: str = __version__
    outputs: list[str] = field(default_factory=list)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        return cls(**d)


# -- commands ------------------------------------------------------------------------

def cmd_dataset(cfg: dict, out: Path) -> RunManifest:
    samples = gen_dataset(cfg["n"], cfg["canvas"], cfg["seed"])
    (out / "samples").mkdir(parents=True, exist_ok=True)
    outputs = []
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filename", "label", "scale", "rotation"])
        for i, s in enumerate(samples):
            name = f"samples/{i:06d}.tsr"
            write_tsr(out / name, s.image[None, None])
            w.writerow([name, CLASSES[s.label], repr(s.scale), repr(s.rotation)])
            outputs.append(name)
    return RunManifest("dataset", cfg, cfg["seed"], outputs=["labels.csv"] + outputs)


def cmd_train(cfg: dict, out: Path) -> RunManifest:
    arch = normalize_arch(cfg["arch"])
    config = TrainConfig(**cfg["train"])
    out.mkdir(parents=True, exist_ok=True)
    train_s, val_s = make_data(config)
    data = SplitData.from_samples(train_s, val_s, config.np_dtype)

    def report(tr, va):
        print(f"epoch={tr['epoch']} train_loss={tr['loss']:.4f} train_acc={tr['accuracy']:.4f} "
              f"val_acc={va['accuracy']:.4f} mean_offset_mag={va['mean_offset_mag']:.5f}", flush=True)

    model, log = train(arch, data, config, progress=report)
    if not log:  # zero epochs: record the initial evaluation only
        acc, loss, mag = evaluate(model, data.x_val, data.y_val)
        log = [dict(epoch=0, split="val", accuracy=acc, loss=loss, mean_offset_mag=mag)]
    write_metrics(out / "metrics.csv", log)
    save_checkpoint(out / "checkpoint", model, config, config.epochs)
    outputs = ["metrics.csv", "checkpoint/checkpoint.json"]
    outputs += [f"checkpoint/params/{name}.tsr" for name, *_ in model.named_params()]
    manifest = RunManifest("train", cfg, config.seed, outputs=outputs)
    manifest.config = dict(cfg, offset_structures=offset_structures(model))
    return manifest


def offset_structures(model: ModelGraph) -> list[str]:
    found = []
    for layer in model.deform_layers:
        if "kgen_weight" in layer.params and "kernel_offsets" not in found:
            found.append("kernel_offsets")
        if "dgen_weight" in layer.params and "data_offsets" not in found:
            found.append("data_offsets")
    return found


def cmd_gradcheck(cfg: dict, out: Path | None):
    report = gradcheck_op(cfg["op"], cfg["seed"], cfg["tol"])
    text = report.format()
    print(text)
    manifest = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text + "\n")
        manifest = RunManifest("gradcheck", cfg, cfg["seed"], outputs=["report.txt"])
    return manifest, report.passed


def _parse_at(text: str) -> tuple[int, int]:
    try:
        y, x = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--at expects 'y,x', got {text!r}") from None
    return y, x


def load_input(spec: str, canvas: int) -> np.ndarray:
    """``path.tsr`` or ``synthetic:<seed>`` or ``synthetic:<shape>:<scale>[:<rotation>]``."""
    if spec.startswith("synthetic:"):
        parts = spec.split(":")[1:]
        if len(parts) == 1:
            img = gen_dataset(1, canvas, int(parts[0]))[0].image
        else:
            if parts[0] not in CLASSES:
                raise UsageError(f"unknown shape {parts[0]!r}")
            rotation = float(parts[2]) if len(parts) > 2 else 0.0
            img = render_shape(CLASSES.index(parts[0]), float(parts[1]), rotation, canvas)
        return img[None, None]
    return read_tsr(spec)[:1]


def trunk(model: ModelGraph) -> ModelGraph:
    """The convolutional part of a classifier (everything before the global pool)."""
    kinds = [l.kind for l in model.layers]
    stop = kinds.index("pool") if "pool" in kinds else len(model.layers)
    return ModelGraph(model.layers[:stop], model.arch, {})


def cmd_erf(cfg: dict, out_prefix: Path):
    j = _parse_at(cfg["at"])
    mode = cfg["mode"]
    model_path = Path(cfg["model"])
    stack = None
    if model_path.suffix == ".json" and json.loads(model_path.read_text()).get("format") != "dkern-checkpoint":
        stack, relu = erflab.load_stack(model_path)
        net = erflab.stack_to_graph(stack, relu=relu)
        dtype = np.float64
    else:
        model, config, _ = load_checkpoint(model_path)
        net, dtype, relu = trunk(model), config.np_dtype, True
        if mode != "backprop":
            raise UsageError("enumeration needs a linear stack spec, not a checkpoint")
    x = load_input(cfg["input"], cfg["canvas"]).astype(dtype)
    if mode != "backprop" and relu:
        raise UsageError("enumeration is only defined for linear stacks (relu=false)")

    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    disagreement = None
    if mode in ("backprop", "both"):
        try:
            emap = erflab.erf_backprop(net, x, j, cfg.get("channel"))
        except IndexError as exc:
            raise UsageError(str(exc)) from None
    if mode in ("enumerate", "both"):
        h, w = x.shape[2:]
        if not (0 <= j[0] < h and 0 <= j[1] < w):
            raise UsageError(f"output coordinate {j} outside {h}x{w}")
        try:
            values = erflab.erf_enumerate_map(stack, j, (h, w))
        except erflab.IntractableError as exc:
            raise UsageError(str(exc)) from None
        if mode == "both":
            disagreement = float(np.abs(values - emap.values).max())
        else:
            emap = erflab.ErfMap(j, values, stack.depth, stack.rf_half_width(), j)
    erflab.export_erf(emap, str(out_prefix))
    base = out_prefix.name
    lines = [f"output_coord={j[0]},{j[1]}"]
    if np.any(emap.values):
        st = erflab.erf_stats(emap)
        lines += [
            f"mass_center={st.mass_center[0]:.6f},{st.mass_center[1]:.6f}",
            f"second_moment={st.second_moment:.6f}",
            f"support_area={st.support_area}",
            f"density={st.density:.6f}",
        ]
    if disagreement is not None:
        lines.append(f"max_abs_diff={disagreement:.3e}")
    print("\n".join(lines))
    manifest = RunManifest("erf", cfg, None, outputs=[f"{base}.pgm", f"{base}.tsr"])
    ok = disagreement is None or disagreement <= ERF_AGREEMENT_TOL
    return manifest, ok


def cmd_inspect(cfg: dict) -> None:
    model, config, epoch = load_checkpoint(cfg["model"])
    print(f"arch={model.arch} epoch={epoch} dtype={config.dtype}")
    total = 0
    for i, layer in enumerate(model.layers):
        n = sum(int(v.size) for v in layer.params.values())
        total += n
        desc = layer.describe()
        extra = ""
        if "spec" in desc:
            s = desc["spec"]
            extra = (f" k={s['kernel_size']} in={s['in_channels']} out={s['out_channels']}"
                     f" stride={s['stride']} depthwise={s['depthwise']}")
        if "scope_size" in desc:
            extra += f" scope={desc['scope_size']} lr_mult={desc['lr_multiplier']}"
        print(f"layer={i} kind={layer.kind} params={n}{extra}")
    print(f"total_params={total}")
    if cfg.get("input"):
        x = load_input(cfg["input"], config.canvas).astype(config.np_dtype)
        model.forward(x)
        for i, layer in enumerate(model.layers):
            for name in ("last_kernel_offsets", "last_data_offsets"):
                off = getattr(layer, name, None)
                if off is not None:
                    print(f"layer={i} {name[5:]}_mean_abs={float(np.abs(off).mean()):.6f} "
                          f"max_abs={float(np.abs(off).max()):.6f}")


# -- argument handling -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dkern", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("dataset", help="render a synthetic shapes dataset")
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--canvas", type=int, default=32)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a classifier")
    t.add_argument("--arch", required=True, help="rigid | dk-global | dk-local | dc | dcdk")
    t.add_argument("--config", help="key=value config file (defaults when omitted)")
    t.add_argument("--out", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of one operator")
    g.add_argument("--op", required=True, help="one of: " + ", ".join(REGISTRY))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=None)
    g.add_argument("--out", help="directory for report and manifest")

    e = sub.add_parser("erf", help="effective receptive field map")
    e.add_argument("--model", required=True, help="checkpoint dir/manifest or linear-stack JSON")
    e.add_argument("--input", required=True, help="file.tsr | synthetic:<seed> | synthetic:<shape>:<scale>[:<rot>]")
    e.add_argument("--at", required=True, help="output coordinate y,x")
    e.add_argument("--mode", choices=("backprop", "enumerate", "both"), default="backprop")
    e.add_argument("--out", required=True, help="output prefix")
    e.add_argument("--canvas", type=int, default=32, help="canvas for synthetic inputs")
    e.add_argument("--channel", type=int, default=None, help="output channel (default: sum of all)")

    i = sub.add_parser("inspect", help="describe a checkpoint and its offsets")
    i.add_argument("--model", required=True)
    i.add_argument("--input", help="optional input for offset statistics")

    r = sub.add_parser("replay", help="re-run a manifest")
    r.add_argument("manifest")
    r.add_argument("--out", help="write outputs here instead of next to the manifest")
    return p


def _resolve(path: str) -> str:
    return str(Path(path).resolve())


def _config_for(args) -> tuple[dict, Path | None]:
    """Turn parsed flags into (resolved config, output location)."""
    if args.command == "dataset":
        if args.n < 0:
            raise UsageError("--n must be non-negative")
        return {"n": args.n, "canvas": args.canvas, "seed": args.seed}, Path(args.out)
    if args.command == "train":
        normalize_arch(args.arch)
        if args.config is not None:
            if not Path(args.config).is_file():
                raise UsageError(f"config file {args.config!r} not found")
            config = TrainConfig.from_file(args.config)
        else:
            config = TrainConfig()
        return {"arch": normalize_arch(args.arch), "train": asdict(config)}, Path(args.out)
    if args.command == "gradcheck":
        if args.op not in REGISTRY:
            raise UsageError(f"unknown op {args.op!r}; choose from {', '.join(REGISTRY)}")
        return {"op": args.op, "seed": args.seed, "tol": args.tol}, (Path(args.out) if args.out else None)
    if args.command == "erf":
        if not Path(args.model).exists():
            raise UsageError(f"model {args.model!r} not found")
        inp = args.input if args.input.startswith("synthetic:") else _resolve(args.input)
        cfg = {"model": _resolve(args.model), "input": inp, "at": args.at, "mode": args.mode,
               "canvas": args.canvas, "channel": args.channel}
        return cfg, Path(args.out)
    if args.command == "inspect":
        return {"model": args.model, "input": args.input}, None
    raise UsageError(f"unknown command {args.command!r}")


def run(command: str, cfg: dict, out: Path | None) -> int:
    """Execute one command and write its manifest; returns the exit code."""
    if command == "dataset":
        manifest, ok, mdir = cmd_dataset(cfg, out), True, out
    elif command == "train":
        manifest, ok, mdir = cmd_train(cfg, out), True, out
    elif command == "gradcheck":
        (manifest, ok), mdir = cmd_gradcheck(cfg, out), out
    elif command == "erf":
        (manifest, ok), mdir = cmd_erf(cfg, out), out.parent
        if manifest is not None:
            manifest.write(mdir / f"{out.name}.manifest.json")
            return EXIT_OK if ok else EXIT_FAIL
    elif command == "inspect":
        cmd_inspect(cfg)
        return EXIT_OK
    else:
        raise UsageError(f"cannot run {command!r}")
    if manifest is not None:
        manifest.write(mdir / "manifest.json")
    return EXIT_OK if ok else EXIT_FAIL


def replay(manifest_path: str, out: str | None) -> int:
    path = Path(manifest_path)
    if not path.is_file():
        raise UsageError(f"manifest {manifest_path!r} not found")
    m = RunManifest.read(path)
    cfg = dict(m.config)
    cfg.pop("offset_structures", None)
    if m.command == "erf":
        prefix = path.name[: -len(".manifest.json")]
        target = Path(out) / prefix if out else path.parent / prefix
    else:
        target = Path(out) if out else path.parent
    if m.command == "train":
        TrainConfig(**cfg["train"])  # validate before running
    return run(m.command, cfg, target)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        with set_threads_from_env():
            if args.command == "replay":
                return replay(args.manifest, args.out)
            cfg, out = _config_for(args)
            return run(args.command, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
