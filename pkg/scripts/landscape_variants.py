"""Loss landscapes of the global adapter for several variants, same seed and directions.

The loss at each grid point is averaged over the clients' held-out splits.

Writes one CSV per variant and prints a flatness summary: the center loss
and the mean rise over the outer ring of the grid.
"""
import argparse
from pathlib import Path

import numpy as np

from heartpfl import metrics
from heartpfl.cli import VARIANTS
from heartpfl.config import ExperimentConfig
from heartpfl.orchestrator import run_experiment


def ring_rise(grid: metrics.LandscapeGrid) -> float:
    L = grid.losses
    ring = np.concatenate([L[0], L[-1], L[1:-1, 0], L[1:-1, -1]])
    return float(ring.mean() - grid.center)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variants", default="baseline,hda,akt,full")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--grid-res", type=int, default=21)
    ap.add_argument("--grid-halfwidth", type=float, default=1.0)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", default="runs/landscape")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(f"{'variant':10s} {'center':>8s} {'ring rise':>10s}")
    for name in args.variants.split(","):
        cfg = ExperimentConfig.load(None, [*args.set, *VARIANTS[name], f"fl.seed={args.seed}"])
        state = run_experiment(cfg).state
        splits = [(c.X_test, c.y_test) for c in state.clients]
        grid = metrics.client_average_landscape(state.global_model, splits, args.grid_halfwidth,
                                                args.grid_res, args.seed)
        metrics.write_landscape_csv(out / f"{name.replace('+', '_')}.csv", grid,
                                    {"config_hash": cfg.config_hash(), "seed": args.seed, "variant": name})
        print(f"{name:10s} {grid.center:8.4f} {ring_rise(grid):10.4f}")


if __name__ == "__main__":
    main()
