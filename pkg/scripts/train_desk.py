"""Train the rigid baseline and a deformable variant at desk scale and compare.

    python scripts/train_desk.py --out runs/desk [--arch dk_local] [--epochs 20]

Writes one sub-directory per model (metrics.csv + checkpoint/) and prints the
final validation accuracies and the offset/scale rank correlation.
"""
import argparse
import time
from dataclasses import replace
from pathlib import Path

from dkern.train import (
    SplitData,
    TrainConfig,
    make_data,
    make_model,
    offset_scale_correlation,
    save_checkpoint,
    set_threads_from_env,
    train,
    write_metrics,
)


def run(arch: str, data, config: TrainConfig, out: Path):
    start = time.perf_counter()

    def progress(tr, va):
        print(f"{arch} epoch {tr['epoch']:2d} loss {tr['loss']:.4f} val {va['accuracy']:.3f} "
              f"|dk| {va['mean_offset_mag']:.4f} {time.perf_counter() - start:.0f}s", flush=True)

    model, log = train(arch, data, config, progress=progress)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / "metrics.csv", log)
    save_checkpoint(out / "checkpoint", model, config, config.epochs)
    return model, log


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--arch", default="dk_local")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--config", help="key=value config file")
    args = p.parse_args()
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.epochs is not None:
        config = replace(config, epochs=args.epochs)
    out = Path(args.out)
    with set_threads_from_env():
        train_s, val_s = make_data(config)
        data = SplitData.from_samples(train_s, val_s, config.np_dtype)
        _, rigid_log = run("rigid", data, config, out / "rigid")
        model, dk_log = run(args.arch, data, config, out / args.arch)
        final = {name: [r for r in log if r["split"] == "val"][-1]["accuracy"]
                 for name, log in (("rigid", rigid_log), (args.arch, dk_log))}
        print(" ".join(f"{k}_val={v:.4f}" for k, v in final.items()))
        if args.arch != "dc":
            trained = offset_scale_correlation(model, val_s)
            untrained = offset_scale_correlation(make_model(args.arch, config), val_s)
            print(f"spearman trained={trained.rho:.4f} untrained={untrained.rho:.4f}")


if __name__ == "__main__":
    main()
