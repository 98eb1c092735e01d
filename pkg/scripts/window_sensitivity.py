"""Plan CIRS and the no-intervention ablation once per seed, then evaluate at several exit windows.

Planning never sees the exit rule, so this equals separate runs per window
at a fraction of the cost.

    python3 scripts/window_sensitivity.py --windows 1,3,5 --seeds 0,1,2
"""
import argparse
import logging

import numpy as np

from cirslab.harness import ExperimentConfig, build_data, evaluate, replace_cfg, train_policy


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--windows", default="1,3,5")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--epochs", type=int)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    windows = [int(n) for n in args.windows.split(",")]
    table = {}
    for seed in [int(s) for s in args.seeds.split(",")]:
        cfg = replace_cfg(ExperimentConfig(), seed=seed, **({"epochs": args.epochs} if args.epochs else {}))
        data = build_data(cfg)
        for pol in ("cirs", "cirs-no-ci"):
            trained = train_policy(replace_cfg(cfg, policy=pol), data)
            for n in windows:
                m = evaluate(trained.policy, data.env.with_exit(window=n), cfg.eval_trajectories, seed,
                             cfg.epochs - 1)
                table.setdefault((pol, n), []).append(m.mean_cum_sat)
    print(f"{'N':>3s} {'cirs':>8s} {'cirs-no-ci':>11s}")
    for n in windows:
        print(f"{n:3d} {np.mean(table['cirs', n]):8.3f} {np.mean(table['cirs-no-ci', n]):11.3f}")


if __name__ == "__main__":
    main()
