#!/usr/bin/env python3
"""Forgetting experiment on the 4-1 disjoint desk benchmark.

Trains fine-tuning, the full method (caf+ad+bkd) and the joint upper bound
for several seeds and prints old/new/all mIoU averaged over seeds.

    python3 scripts/run_forgetting.py --out runs/forgetting
"""
import argparse
import logging
import time

from cafseg.experiments import SEEDS, desk_config, mean_over_seeds, mean_step1, run_benchmark
from cafseg.train import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/forgetting")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    ap.add_argument("--config", default=None, help="key = value file (default: desk config)")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config(args.config) if args.config else desk_config()
    t0 = time.perf_counter()
    runs = run_benchmark(cfg, args.seeds, ("ft", "full", "joint"), args.out)
    print(f"\n{len(args.seeds)} seeds, {time.perf_counter() - t0:.0f}s")
    print(f"step-1 old mIoU: {100 * mean_step1(runs):.2f}")
    for v in ("ft", "full", "joint"):
        cells = "  ".join(f"{g}={100 * mean_over_seeds(runs, v, g):6.2f}" for g in ("old", "new", "all"))
        print(f"{v:<6} {cells}")


if __name__ == "__main__":
    main()
