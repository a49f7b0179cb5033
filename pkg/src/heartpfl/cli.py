"""Command-line entry point: run, ablate, landscape, partition-report.

BLAS runs single-threaded under every subcommand: OpenBLAS rounds
differently with different thread counts, and records must not depend on
them.  Parallelism comes from training sampled clients on worker threads
instead; ``HEARTPFL_NUM_THREADS`` caps that worker count.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import metrics
from .config import ConfigError, ExperimentConfig, default_config_text
from .data import label_entropy, partition_histograms
from .models import load_model
from .orchestrator import build_federation, prepare_data, run_experiment

THREADS_ENV = "HEARTPFL_NUM_THREADS"

# variant -> overrides on top of the loaded config
VARIANTS: dict[str, list[str]] = {
    "baseline": ["fl.method=fedavg_per"],
    "hda": ["fl.method=hda_only"],
    "akt": ["fl.method=akt_only"],
    "hda+akt": ["fl.method=heart_pfl"],
    "clean": ["fl.method=heart_pfl", "akt.use_clean=true", "akt.use_adversarial=false", "akt.use_symmetric_kl=false"],
    "adv": ["fl.method=heart_pfl", "akt.use_clean=false", "akt.use_adversarial=true", "akt.use_symmetric_kl=false"],
    "clean+skl": ["fl.method=heart_pfl", "akt.use_clean=true", "akt.use_adversarial=false", "akt.use_symmetric_kl=true"],
    "clean+adv": ["fl.method=heart_pfl", "akt.use_clean=true", "akt.use_adversarial=true", "akt.use_symmetric_kl=false"],
    "adv+skl": ["fl.method=heart_pfl", "akt.use_clean=false", "akt.use_adversarial=true", "akt.use_symmetric_kl=true"],
    "full": ["fl.method=heart_pfl", "akt.use_clean=true", "akt.use_adversarial=true", "akt.use_symmetric_kl=true"],
}


class CliError(Exception):
    pass


def thread_cap() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise CliError(f"{THREADS_ENV} must be >= 1")
    return n


def effective_workers(cfg: ExperimentConfig) -> int:
    cap = thread_cap()
    return cfg.run.workers if cap is None else min(cfg.run.workers, cap)


def _load(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"fl.seed={args.seed}")
    return ExperimentConfig.load(args.config, overrides)


def _header(cfg: ExperimentConfig) -> dict[str, object]:
    return {"config_hash": cfg.config_hash(), "seed": cfg.fl.seed}


def _echo_config(cfg: ExperimentConfig, path: Path) -> None:
    h = _header(cfg)
    cfg.save(path, header=f"# resolved config; config_hash {h['config_hash']}, seed {h['seed']}\n")


def cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(args.out or cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out / "config.ini")
    result = run_experiment(cfg, out, workers=effective_workers(cfg), checkpoint_every=cfg.run.checkpoint_every)
    if result.records:
        f = result.final
        print(f"{cfg.fl.method} seed={cfg.fl.seed} hash={cfg.config_hash()} rounds={len(result.records)} "
              f"personalized={f.personalized_acc_mean:.4f} global={f.global_acc:.4f}")
    print(f"wrote {out}")
    return 0


def parse_variants(text: str) -> list[str]:
    names = [v.strip() for v in text.split(",") if v.strip()]
    unknown = [v for v in names if v not in VARIANTS]
    if unknown or not names:
        raise CliError(f"unknown variant(s) {unknown}; valid: {', '.join(VARIANTS)}")
    return names


def parse_seeds(text: str | None, default: int) -> list[int]:
    if text is None:
        return [default]
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise CliError(f"--seeds must be comma-separated integers, got {text!r}") from None


def run_ablation(base: ExperimentConfig, variants: list[str], seeds: list[int],
                 out: Path | None = None, log=print, workers: int = 1) -> list[dict]:
    """Run every variant under every seed; one row per variant."""
    rows = []
    for name in variants:
        row = {"variant": name, "personalized": [], "global": [], "partition": [], "config_hash": []}
        for seed in seeds:
            cfg = base.with_overrides(VARIANTS[name] + [f"fl.seed={seed}"])
            run_dir = None if out is None else out / name.replace("+", "_") / f"seed{seed}"
            result = run_experiment(cfg, run_dir, workers=workers)
            if not result.records:
                raise CliError("ablation needs at least one round")
            f = result.final
            row["personalized"].append(f.personalized_acc_mean)
            row["global"].append(f.global_acc)
            row["partition"].append(result.state.partition.fingerprint())
            row["config_hash"].append(cfg.config_hash())
            log(f"  {name:10s} seed {seed}: personalized {f.personalized_acc_mean:.4f} global {f.global_acc:.4f}")
        rows.append(row)
    return rows


def write_ablation_csv(path: Path, rows: list[dict], seeds: list[int]) -> None:
    fields = (["variant", "config_hash", "partition", "personalized_mean", "global_mean"]
              + [f"personalized_seed{s}" for s in seeds] + [f"global_seed{s}" for s in seeds])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            w.writerow([r["variant"], ";".join(r["config_hash"]), ";".join(r["partition"]),
                        repr(float(np.mean(r["personalized"]))), repr(float(np.mean(r["global"])))]
                       + [repr(v) for v in r["personalized"]] + [repr(v) for v in r["global"]])


def cmd_ablate(args) -> int:
    variants = parse_variants(args.variants)
    base = _load(args)
    seeds = parse_seeds(args.seeds, base.fl.seed)
    out = Path(args.out or base.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(base, out / "config.ini")
    rows = run_ablation(base, variants, seeds, out, workers=effective_workers(base))
    write_ablation_csv(out / "ablation.csv", rows, seeds)
    print(f"{'variant':10s} {'personalized':>12s} {'global':>8s}")
    for r in rows:
        print(f"{r['variant']:10s} {np.mean(r['personalized']):12.4f} {np.mean(r['global']):8.4f}")
    print(f"wrote {out / 'ablation.csv'}")
    return 0


def cmd_landscape(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliError(f"checkpoint not found: {ckpt}")
    backbone = ckpt.parent / "backbone.npz"
    if not backbone.is_file():
        raise CliError(f"backbone checkpoint not found next to {ckpt}")
    cfg = _load(args)
    with np.load(ckpt, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
    if meta.get("config_hash") not in (None, cfg.config_hash()):
        print(f"warning: checkpoint config_hash {meta['config_hash']} differs from {cfg.config_hash()}",
              file=sys.stderr)
    model = load_model(backbone, ckpt)
    state = build_federation(cfg)
    # a client checkpoint is probed on that client's held-out split, a global one on every client's
    clients = [state.clients[int(meta["client"])]] if "client" in meta else state.clients
    grid = metrics.client_average_landscape(model, [(c.X_test, c.y_test) for c in clients],
                                            args.grid_halfwidth, args.grid_res, cfg.fl.seed)
    out = Path(args.out) if args.out else ckpt.parent.parent / "landscape.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_landscape_csv(out, grid, {**_header(cfg), "checkpoint": ckpt.name,
                                            "half_width": args.grid_halfwidth, "resolution": args.grid_res})
    print(f"center loss {grid.center:.6f}; wrote {out}")
    return 0


def partition_report(cfg: ExperimentConfig) -> tuple[list[str], list[list]]:
    prep = prepare_data(cfg)
    hist = partition_histograms(prep.clients, prep.partition)
    header = ["client"] + [f"class{v}" for v in range(hist.shape[1])] + ["total", "entropy"]
    rows = [[k, *map(int, h), int(h.sum()), round(label_entropy(h), 6)] for k, h in enumerate(hist)]
    return header, rows


def cmd_partition_report(args) -> int:
    cfg = _load(args)
    header, rows = partition_report(cfg)
    h = _header(cfg)
    lines = [f"# config_hash: {h['config_hash']}", f"# seed: {h['seed']}", ",".join(header)]
    lines += [",".join(str(v) for v in r) for r in rows]
    lines.append(f"# mean entropy: {np.mean([r[-1] for r in rows]):.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_default_config(args) -> int:
    print(default_config_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="heartpfl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="experiment config file (INI); defaults apply when omitted")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. fl.rounds=5 (repeatable)")
        p.add_argument("--seed", type=int, help="master seed (same as --set fl.seed=N)")
        p.add_argument("--out", help=out_help)

    p = sub.add_parser("run", help="run one experiment")
    common(p, "output directory (default: run.out_dir)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run ablation variants under shared seeds")
    common(p, "output directory (default: run.out_dir)")
    p.add_argument("--variants", default="baseline,hda,akt,full", help=f"comma list from {', '.join(VARIANTS)}")
    p.add_argument("--seeds", help="comma list of seeds (default: the config seed)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("landscape", help="loss landscape around a checkpointed adapter")
    common(p, "output CSV (default: <run dir>/landscape.csv)")
    p.add_argument("--checkpoint", required=True, help="adapter checkpoint (.npz) inside a run's checkpoints/")
    p.add_argument("--grid-res", type=int, default=21)
    p.add_argument("--grid-halfwidth", type=float, default=1.0)
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("partition-report", help="per-client class counts and label entropy")
    common(p, "also write the report to this file")
    p.set_defaults(func=cmd_partition_report)

    p = sub.add_parser("default-config", help="print the default config file")
    p.set_defaults(func=cmd_default_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        thread_cap()
        with threadpool_limits(limits=1, user_api="blas"):
            return args.func(args)
    except (ConfigError, CliError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
