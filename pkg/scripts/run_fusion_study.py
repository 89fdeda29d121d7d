#!/usr/bin/env python3
"""Test-time fusion strategies during step-2 training of the full method.

Every ``--every`` epochs the step-2 model is evaluated with the fusion module
skipped, fed zeros for the old branch, or fed the previous model's features.
Per-seed curves land in ``<out>/seed*/full/fusion_modes.csv``.
"""
import argparse
import logging

from cafseg.experiments import SEEDS, desk_config, desk_corpus, desk_scenario, mean_fusion, run_seed
from cafseg.train import load_config

MODES = ("skip", "zeropad", "concat")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/fusion")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    ap.add_argument("--every", type=int, default=3)
    ap.add_argument("--config", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config(args.config) if args.config else desk_config()
    train, val = desk_corpus()
    runs = [run_seed(s, train, val, desk_scenario(), cfg, ("full",), args.out, "full", args.every)
            for s in args.seeds]
    epochs = sorted({e for r in runs for (e, _, _, _) in r.fusion})
    print("\nold-class mIoU averaged over seeds")
    print(f"{'epoch':>5} " + " ".join(f"{m:>8}" for m in MODES))
    for e in epochs:
        print(f"{e:>5} " + " ".join(f"{100 * mean_fusion(runs, e, m):8.2f}" for m in MODES))


if __name__ == "__main__":
    main()
