"""Compare effective receptive fields of two trained classifiers on one image.

    python scripts/erf_compare.py runs/desk/rigid/checkpoint runs/desk/dk_local/checkpoint \
        --shape disk --scale 2.0 --out runs/erf

For each checkpoint the ERF of the centre output unit (summed over channels)
is exported as ``<name>.pgm`` / ``<name>.tsr`` and its statistics printed.
"""
import argparse
from pathlib import Path

import numpy as np

from dkern import erf
from dkern.cli import trunk
from dkern.data import CLASSES, render_shape
from dkern.train import load_checkpoint, set_threads_from_env


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--shape", default="disk", choices=CLASSES)
    p.add_argument("--scale", type=float, default=2.0)
    p.add_argument("--rotation", type=float, default=0.0)
    p.add_argument("--out", default="runs/erf")
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(f"{'model':<12} {'second_moment':>14} {'support':>8} {'density':>8}")
    with set_threads_from_env():
        for path in args.checkpoints:
            model, config, _ = load_checkpoint(path)
            img = render_shape(CLASSES.index(args.shape), args.scale, args.rotation, config.canvas)
            x = img[None, None].astype(config.np_dtype)
            net = trunk(model)
            h, w = net.forward(x).shape[2:]
            emap = erf.erf_backprop(net, x, (h // 2, w // 2), channel=None)
            emap.values = np.abs(emap.values)
            st = erf.erf_stats(emap)
            erf.export_erf(emap, str(out / model.arch))
            print(f"{model.arch:<12} {st.second_moment:14.3f} {st.support_area:8d} {st.density:8.4f}")


if __name__ == "__main__":
    main()
