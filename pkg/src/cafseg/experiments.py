"""Multi-seed desk-scale benchmark: forgetting, ablation and fusion-mode runs.

For every training seed one step-1 model is trained and shared by all
incremental variants, so they differ only in how step 2 is learned. The
joint upper bound is trained separately on all classes at once.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, DatasetSpec, generate
from .protocol import Scenario, build_scenario
from .train import TrainConfig, run_experiment, train_first_step

log = logging.getLogger(__name__)

CORPUS_SEED = 1
CORPUS_IMAGES = 200
SEEDS = (0, 1, 2)

# Calibrated for the toy network at 32x32: the later-step learning rate and the
# number of later epochs are raised so plain fine-tuning visibly forgets, and a
# global gradient-norm clip keeps the distillation terms stable at
# lambda_ad = 1000.
DESK_OVERRIDES = dict(batch_size=4, epochs=30, lr_later=3e-3, epochs_later=60, grad_clip=5.0)


def desk_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**DESK_OVERRIDES, **overrides})


def desk_corpus(seed: int = CORPUS_SEED, num_images: int = CORPUS_IMAGES) -> tuple[Dataset, Dataset]:
    """Training corpus plus a half-size validation corpus drawn with ``seed + 1``."""
    train = generate(DatasetSpec(seed=seed, num_images=num_images))
    val = generate(DatasetSpec(seed=seed + 1, num_images=max(1, num_images // 2)))
    return train, val


def desk_scenario() -> Scenario:
    return build_scenario(range(1, 6), "4-1", "disjoint")


@dataclass
class SeedRun:
    seed: int
    step1: dict[str, float]
    final: dict[str, dict[str, float]] = field(default_factory=dict)
    fusion: list[tuple[int, str, str, float]] = field(default_factory=list)
    seconds: dict[str, float] = field(default_factory=dict)


def _read_fusion(path: Path) -> list[tuple[int, str, str, float]]:
    if not path.exists():
        return []
    with open(path, newline="") as f:
        return [(int(r["epoch"]), r["mode"], r["group"], float(r["miou"])) for r in csv.DictReader(f)]


def run_seed(seed: int, train: Dataset, val: Dataset, scenario: Scenario, cfg: TrainConfig,
             variants=("ft", "kd", "full", "joint"), out_root=None,
             snapshot_variant: str | None = "full", snapshot_every: int = 3) -> SeedRun:
    cfg = dataclasses.replace(cfg, seed=seed, snapshot_every=0)
    t0 = time.perf_counter()
    first = train_first_step(scenario, train, val, cfg)
    run = SeedRun(seed, {})
    run.seconds["step1"] = time.perf_counter() - t0
    for variant in variants:
        vcfg = cfg
        if variant == snapshot_variant:
            vcfg = dataclasses.replace(cfg, snapshot_every=snapshot_every)
        out = None if out_root is None else Path(out_root) / f"seed{seed}" / variant
        t0 = time.perf_counter()
        initial = None if variant == "joint" else first
        results = run_experiment(scenario, train, val, vcfg, variant, out, initial=initial)
        run.seconds[variant] = time.perf_counter() - t0
        run.final[variant] = results[-1].summary
        if variant != "joint" and not run.step1:
            run.step1 = results[0].summary
        if out is not None and variant == snapshot_variant:
            run.fusion = _read_fusion(out / "fusion_modes.csv")
        log.info("seed %d %s: %s (%.0fs)", seed, variant,
                 {k: round(v, 3) for k, v in run.final[variant].items()}, run.seconds[variant])
    return run


def run_benchmark(cfg: TrainConfig | None = None, seeds=SEEDS, variants=("ft", "kd", "full", "joint"),
                  out_root=None, corpus: tuple[Dataset, Dataset] | None = None) -> list[SeedRun]:
    cfg = cfg or desk_config()
    train, val = corpus or desk_corpus()
    scenario = desk_scenario()
    runs = [run_seed(s, train, val, scenario, cfg, variants, out_root) for s in seeds]
    if out_root is not None:
        write_benchmark_csv(runs, Path(out_root) / "benchmark.csv")
    return runs


def mean_over_seeds(runs: list[SeedRun], variant: str, group: str) -> float:
    vals = [r.final[variant][group] for r in runs if variant in r.final]
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def mean_step1(runs: list[SeedRun], group: str = "old") -> float:
    return float(np.mean([r.step1[group] for r in runs]))


def mean_fusion(runs: list[SeedRun], epoch: int, mode: str, group: str = "old") -> float:
    vals = [v for r in runs for (e, m, g, v) in r.fusion if e == epoch and m == mode and g == group]
    return float(np.mean(vals)) if vals else math.nan


def write_benchmark_csv(runs: list[SeedRun], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("seed", "variant", "group", "miou"))
        for r in runs:
            for g, v in r.step1.items():
                w.writerow((r.seed, "step1", g, f"{v:.6f}"))
            for variant, summary in r.final.items():
                for g, v in summary.items():
                    w.writerow((r.seed, variant, g, f"{v:.6f}"))


# ------------------------------------------------------------------ reports


def read_summary(run_dir) -> dict[int, dict[str, float]]:
    """``summary.csv`` of one run as {step: {group: miou}}."""
    out: dict[int, dict[str, float]] = {}
    with open(Path(run_dir) / "summary.csv", newline="") as f:
        for row in csv.DictReader(f):
            out.setdefault(int(row["step"]), {})[row["group"]] = float(row["miou"])
    return out


def format_report(run_dirs) -> str:
    """One line per run with its final-step old/new/all mIoU (in points)."""
    lines = [f"{'run':<40} {'step':>4} {'old':>7} {'new':>7} {'all':>7}"]
    for d in run_dirs:
        summary = read_summary(d)
        step = max(summary)
        s = summary[step]
        cells = " ".join(f"{100 * s.get(g, math.nan):7.2f}" for g in ("old", "new", "all"))
        lines.append(f"{str(d):<40} {step:>4} {cells}")
    return "\n".join(lines)
