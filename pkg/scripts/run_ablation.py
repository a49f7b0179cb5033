"""Component ablation on the default benchmark, averaged over seeds.

    python3 scripts/run_ablation.py --seeds 0,1,2,3,4 --out runs/ablation
"""
import argparse
from pathlib import Path

import numpy as np

from heartpfl.cli import VARIANTS, run_ablation, write_ablation_csv
from heartpfl.config import ExperimentConfig

DEFAULT = "baseline,hda,akt,clean,adv,clean+skl,clean+adv,adv+skl,full"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variants", default=DEFAULT, help=f"comma list from {', '.join(VARIANTS)}")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    base = ExperimentConfig.load(None, args.set)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(base, args.variants.split(","), seeds, out)
    write_ablation_csv(out / "ablation.csv", rows, seeds)

    ref = np.mean(rows[0]["personalized"])
    print(f"\n{'variant':10s} {'personalized':>12s} {'std':>6s} {'vs ' + rows[0]['variant']:>12s} {'global':>8s}")
    for r in rows:
        p = np.asarray(r["personalized"])
        print(f"{r['variant']:10s} {100 * p.mean():11.2f}% {100 * p.std():6.2f} "
              f"{100 * (p.mean() - ref):+11.2f}pp {100 * np.mean(r['global']):7.2f}%")


if __name__ == "__main__":
    main()
