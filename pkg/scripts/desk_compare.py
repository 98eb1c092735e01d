"""Compare every policy on the desk-scale categorical environment over several seeds.

Writes one metrics directory per (policy, seed) plus summary.csv with the
final-epoch numbers, and prints the seed means.

    python3 scripts/desk_compare.py --seeds 0,1,2,3,4 --out runs/desk
"""
import argparse
import csv
import logging
from pathlib import Path

import numpy as np

from cirslab.harness import POLICIES, ExperimentConfig, build_data, load_config, replace_cfg, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="base JSON config (defaults to the desk setup)")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--policies", default=",".join(POLICIES))
    ap.add_argument("--window", type=int, help="override the exit window N")
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    base = load_config(args.config) if args.config else ExperimentConfig()
    if args.window:
        base = replace_cfg(base, env={"window": args.window})
    if args.epochs:
        base = replace_cfg(base, epochs=args.epochs)
    out = Path(args.out)
    rows = []
    for seed in [int(s) for s in args.seeds.split(",")]:
        cfg = replace_cfg(base, seed=seed)
        data = build_data(cfg)
        for pol in args.policies.split(","):
            last = run_experiment(replace_cfg(cfg, policy=pol, out=str(out / f"{pol}_seed{seed}")), data=data)[-1]
            rows.append((pol, seed, last.mean_cum_sat, last.mean_len, last.mean_single_round))

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "seed", "final_cum_sat", "final_len", "final_single_round"])
        w.writerows(rows)
    print(f"{'policy':16s} {'cum_sat':>8s} {'len':>6s} {'single':>7s}")
    for pol in args.policies.split(","):
        sel = np.array([r[2:] for r in rows if r[0] == pol])
        print(f"{pol:16s} {sel[:, 0].mean():8.3f} {sel[:, 1].mean():6.2f} {sel[:, 2].mean():7.3f}")


if __name__ == "__main__":
    main()
