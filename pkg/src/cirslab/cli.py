"""Command-line entry point: one experiment run or a tau / tau* sweep."""
from __future__ import annotations

import argparse
import logging
import sys

from .harness import (ENV_KINDS, POLICIES, ConfigError, ExperimentConfig, StageError, load_config,
                      replace_cfg, run_experiment, sweep)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cirslab", description=__doc__)
    p.add_argument("--config", help="JSON config; flags below override it")
    p.add_argument("--env", choices=ENV_KINDS)
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--seed", type=_seed)
    p.add_argument("--max-round", type=int, dest="max_round")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    p.add_argument("--sweep-tau", type=_floats, dest="sweep_tau", help="e.g. 0,1,2")
    p.add_argument("--sweep-tau-star", type=_floats, dest="sweep_tau_star", help="e.g. 0,0.05,0.2")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    env = {k: v for k, v in (("kind", args.env), ("max_round", args.max_round)) if v is not None}
    top = {k: getattr(args, k) for k in ("policy", "seed", "epochs", "out") if getattr(args, k) is not None}
    cfg = replace_cfg(cfg, **({"env": env} if env else {}), **top)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        if args.sweep_tau or args.sweep_tau_star:
            taus = args.sweep_tau or [cfg.user_model.tau]
            stars = args.sweep_tau_star or [cfg.user_model.tau_star]
            for tau, ts, final in sweep(cfg, taus, stars):
                print(f"tau={tau:g} tau*={ts:g} final_cum_sat={final:.4f}")
            print(f"wrote {cfg.out}/sweep.csv")
            return 0
        last = run_experiment(cfg)[-1]
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    print(f"{cfg.policy} seed={cfg.seed}: cum_sat={last.mean_cum_sat:.4f} len={last.mean_len:.2f} "
          f"single_round={last.mean_single_round:.4f}")
    print(f"wrote {cfg.out}/metrics.csv")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
