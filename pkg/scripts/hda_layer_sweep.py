"""Vary how many taps count as early (cosine) vs deep (MSE) in HDA.

num_early=0 is all-MSE, num_early=L is all-cosine.  Runs default to per_batch
prototypes: with epoch_snapshot the HDA term has no gradient, so the split
cannot change training.
"""
import argparse

import numpy as np

from heartpfl.config import ExperimentConfig
from heartpfl.orchestrator import run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--method", default="hda_only")
    ap.add_argument("--prototype-mode", default="per_batch", choices=["per_batch", "epoch_snapshot"])
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()

    num_layers = len(ExperimentConfig.load(None, args.set).model.widths)
    print(f"{'num_early':>9s} {'personalized':>12s} {'alignment':>10s}  per-layer alignment")
    for k in range(num_layers + 1):
        acc, align, per_layer = [], [], []
        for s in args.seeds.split(","):
            cfg = ExperimentConfig.load(None, [*args.set, f"fl.method={args.method}", f"fl.seed={s}",
                                               f"hda.num_early={k}", f"hda.prototype_mode={args.prototype_mode}"])
            f = run_experiment(cfg).final
            acc.append(f.personalized_acc_mean)
            align.append(f.alignment)
            per_layer.append(f.alignment_per_layer)
        layers = " ".join(f"{v:.3f}" for v in np.mean(per_layer, axis=0))
        print(f"{k:9d} {100 * np.mean(acc):11.2f}% {np.mean(align):10.4f}  {layers}")


if __name__ == "__main__":
    main()
