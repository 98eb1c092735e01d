"""Grid over the pre-learning and planning temperatures for CIRS; prints the matrix.

    python3 scripts/tau_sweep.py --taus 0,1,2 --tau-stars 0,0.05,0.2 --out runs/sweep
"""
import argparse
import logging

from cirslab.harness import ExperimentConfig, load_config, replace_cfg, sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--taus", default="0,1,2")
    ap.add_argument("--tau-stars", default="0,0.05,0.2")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = replace_cfg(cfg, seed=args.seed, out=args.out)
    taus = [float(x) for x in args.taus.split(",")]
    stars = [float(x) for x in args.tau_stars.split(",")]
    grid = {(a, b): c for a, b, c in sweep(cfg, taus, stars)}
    print("tau \\ tau*  " + " ".join(f"{b:>8g}" for b in stars))
    for a in taus:
        print(f"{a:<11g} " + " ".join(f"{grid[a, b]:8.3f}" for b in stars))


if __name__ == "__main__":
    main()
