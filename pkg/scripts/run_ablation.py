#!/usr/bin/env python3
"""Component ablation on the 4-1 disjoint desk benchmark.

Adds one component at a time on top of fine-tuning and reports the
seed-averaged old/new/all mIoU of each variant after the last step.

    python3 scripts/run_ablation.py --variants ft kd bkd ad+bkd caf+ad+bkd
"""
import argparse
import logging
import time

from cafseg.experiments import SEEDS, desk_config, mean_over_seeds, run_benchmark
from cafseg.train import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    ap.add_argument("--variants", nargs="+", default=["ft", "kd", "bkd", "ad+bkd", "caf+ad+bkd"])
    ap.add_argument("--config", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config(args.config) if args.config else desk_config()
    t0 = time.perf_counter()
    runs = run_benchmark(cfg, args.seeds, tuple(args.variants), args.out)
    print(f"\n{len(args.seeds)} seeds, {time.perf_counter() - t0:.0f}s")
    for v in args.variants:
        cells = "  ".join(f"{g}={100 * mean_over_seeds(runs, v, g):6.2f}" for g in ("old", "new", "all"))
        print(f"{v:<12} {cells}")


if __name__ == "__main__":
    main()
