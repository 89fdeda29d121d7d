"""Command-line entry point: ``cafseg <command> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import data as data_mod
from .caf import FusionMode
from .checkpoint import load_checkpoint
from .errors import CafError
from .experiments import format_report
from .gradcheck import format_table, run_gradcheck
from .metrics import format_value
from .protocol import Scenario, build_scenario
from .train import TrainConfig, evaluate, load_config, run_experiment, summarize

FUSION_CHOICES = ("skip", "zeropad", "concat")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("config overrides (take precedence over --config)")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = {"int": int, "float": float}.get(str(f.type), str)
        kwargs = dict(type=kind, default=None, dest=f.name)
        if f.name == "fusion_mode":
            kwargs["choices"] = FUSION_CHOICES
        group.add_argument(flag, **kwargs)


def _universe(dataset: data_mod.Dataset) -> list[int]:
    ids = set()
    for m in dataset.masks:
        ids.update(int(v) for v in set(m.ravel().tolist()))
    return sorted(i for i in ids if i not in (0, 255))


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    spec = data_mod.DatasetSpec.with_classes(args.classes, seed=args.seed, num_images=args.num_images)
    val_spec = dataclasses.replace(spec, seed=args.seed + 1, num_images=max(1, args.num_images // 2))
    data_mod.save(data_mod.generate(spec), out / "train")
    data_mod.save(data_mod.generate(val_spec), out / "val")
    print(f"wrote {spec.num_images} training and {val_spec.num_images} validation images to {out}")
    return 0


def cmd_train(args) -> int:
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig)}
    cfg = load_config(args.config, overrides)
    train = data_mod.load(Path(args.data) / "train")
    if cfg.holdout > 0:
        train, val = train.holdout_split(cfg.holdout, cfg.seed)
    else:
        val = data_mod.load(Path(args.data) / "val")
    scenario = build_scenario(_universe(train), args.scenario, args.setting)
    results = run_experiment(scenario, train, val, cfg, args.variant, args.out)
    for r in results:
        print(f"step {r.step}: " + " ".join(f"{g}={format_value(r.summary[g])}" for g in ("old", "new", "all")))
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    model = load_checkpoint(ckpt)
    if "scenario" not in model.meta:
        raise CafError(f"{ckpt}: checkpoint does not record its scenario")
    scenario = Scenario.parse(model.meta["scenario"])
    mode = FusionMode.from_cli(args.fusion_mode)
    previous = None
    if mode.needs_old and model.step > 1:
        prev_path = Path(args.previous) if args.previous else ckpt.with_name(f"step{model.step - 1}.ckpt")
        previous = load_checkpoint(prev_path)
    elif mode.needs_old:
        mode = FusionMode.TEST_SKIP
    data_dir = Path(args.data) / "val" if (Path(args.data) / "val").is_dir() else Path(args.data)
    val = data_mod.load(data_dir)
    cm = evaluate(model, val, scenario, model.step, mode, previous)
    summary = summarize(cm, scenario, model.step)
    print(f"step {model.step} mode {args.fusion_mode}: "
          + " ".join(f"{g}={format_value(summary[g])}" for g in ("old", "new", "all")))
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(seeds=range(args.seed, args.seed + args.seeds), step=args.step)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    return 0


def _run_dirs(paths) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if (p / "summary.csv").exists():
            found.append(p)
        else:
            found.extend(sorted(q.parent for q in p.rglob("summary.csv")))
    return found


def cmd_report(args) -> int:
    dirs = _run_dirs(args.runs)
    if not dirs:
        print("no runs with summary.csv found", file=sys.stderr)
        return 1
    print(format_report(dirs))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cafseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shapes corpus")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--num-images", type=int, default=200)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run every step of an incremental scenario")
    p.add_argument("--scenario", default="4-1")
    p.add_argument("--setting", default="disjoint", choices=("disjoint", "overlapped"))
    p.add_argument("--variant", default="full",
                   help="ft, kd, bkd, full, joint or a '+' list of caf/ad/kd/bkd")
    p.add_argument("--config", default=None, help="key = value file")
    p.add_argument("--data", required=True, help="directory made by gen-data")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fusion-mode", default="skip", choices=FUSION_CHOICES)
    p.add_argument("--data", required=True)
    p.add_argument("--previous", default=None,
                   help="previous-step checkpoint for concat (default: step<N-1>.ckpt alongside)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--step", type=int, default=2, choices=(1, 2))
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="tabulate final-step mIoU of finished runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CafError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
