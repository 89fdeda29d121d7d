"""Training loop, evaluation and end-to-end incremental experiments."""
from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attentive_distillation import loss_ad
from .autodiff import Tensor
from .caf import FusionMode
from .checkpoint import save_checkpoint
from .data import Dataset
from .losses import (GAMMA_MAX, LAMBDA_AD, LAMBDA_D, StepConfig, gamma, hat_phi,
                     kd_terms, seg_loss, total_loss)
from .metrics import ConfusionMatrix, format_value
from .model import ModelLineage, ModelState, OldOut, advance_step, forward, forward_old, predict
from .protocol import Scenario, eval_labels, filter_step, remap_labels

log = logging.getLogger(__name__)

COMPONENTS = ("caf", "ad", "kd", "bkd")
VARIANT_ALIASES = {"ft": "", "baseline": "", "full": "caf+ad+bkd", "method": "caf+ad+bkd"}


@dataclass
class TrainConfig:
    lr_first: float = 1e-2
    lr_later: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    epochs: int = 30
    epochs_later: int = 30
    batch_size: int = 4
    lambda_ad: float = LAMBDA_AD
    lambda_d: float = LAMBDA_D
    gamma_max: float = GAMMA_MAX
    seed: int = 0
    channels: int = 32
    fusion_mode: str = "skip"
    snapshot_every: int = 0
    holdout: float = 0.0
    new_row_std: float = 0.01
    ad_old_site: str = "z_bar"
    grad_clip: float = 0.0

    def __post_init__(self):
        for f in ("lr_first", "lr_later", "epochs", "epochs_later", "batch_size", "channels"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if not 0.0 <= self.holdout < 1.0:
            raise ValueError("holdout must lie in [0, 1)")

    def lr_for_step(self, step: int) -> float:
        return self.lr_first if step == 1 else self.lr_later

    def epochs_for_step(self, step: int) -> int:
        return self.epochs if step == 1 else self.epochs_later

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))


def _coerce(kind, raw: str):
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(types[key], value)
    return out


def load_config(path=None, overrides: dict | None = None, env=None) -> TrainConfig:
    """Defaults < config file < explicit overrides < ``CAF_SEED``."""
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    env = os.environ if env is None else env
    if env.get("CAF_SEED"):
        values["seed"] = int(env["CAF_SEED"])
    return TrainConfig(**values)


def parse_variant(variant: str) -> frozenset[str]:
    v = VARIANT_ALIASES.get(variant, variant)
    if v == "joint":
        return frozenset({"joint"})
    parts = frozenset(p for p in v.split("+") if p and p not in ("baseline", "ft"))
    unknown = parts - set(COMPONENTS)
    if unknown:
        raise ValueError(f"unknown variant component(s) {sorted(unknown)} in {variant!r}")
    if {"kd", "bkd"} <= parts:
        raise ValueError("kd and bkd are alternatives")
    return parts


class SGD:
    """SGD with momentum, L2 weight decay and polynomial lr decay."""

    def __init__(self, params, lr: float, momentum: float, weight_decay: float,
                 total_iters: int, power: float = 0.9, clip: float = 0.0):
        self.params = list(params)
        self.clip = clip
        self.base_lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.total_iters, self.power = max(1, total_iters), power
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.params}
        self.iteration = 0

    @property
    def lr(self) -> float:
        return self.base_lr * (1.0 - min(self.iteration, self.total_iters - 1) / self.total_iters) ** self.power

    def step(self) -> None:
        lr = self.lr
        scale = 1.0
        if self.clip > 0:
            norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params))
            if norm > self.clip:
                scale = self.clip / norm
        for p in self.params:
            g = scale * p.grad + self.weight_decay * p.data
            v = self.velocity[p.name]
            v *= self.momentum
            v += g
            p.data = p.data - lr * v
        self.iteration += 1


@dataclass
class LossReport:
    seg: float
    ad: float = 0.0
    l_b: float = 0.0
    l_n: float = 0.0
    gamma: float = 1.0
    d: float = 0.0
    total: float = 0.0


def compute_losses(model: ModelState, old: ModelState | None, x: np.ndarray, labels: np.ndarray,
                   cfg: TrainConfig, step_cfg: StepConfig, parts: frozenset[str],
                   old_out: OldOut | None = None) -> tuple[Tensor, LossReport]:
    """Build the training loss graph for one batch."""
    distill = old is not None and bool(parts & {"ad", "kd", "bkd"})
    use_fusion = old is not None and "caf" in parts
    mode = FusionMode.TRAIN_FUSE if use_fusion else FusionMode.TEST_SKIP
    need_old = distill or use_fusion
    out, old_out = forward(model, Tensor(x), mode, old if need_old else None,
                           old_out if need_old else None)
    seg = seg_loss(out.logits, labels, step_cfg)
    report = LossReport(seg=seg.item())
    zero = Tensor(0.0)
    l_ad, l_d = zero, zero
    if old is not None and "ad" in parts:
        z_ref = old_out.z_bar if cfg.ad_old_site == "z_bar" else old_out.z
        l_ad = loss_ad(out.z_bar, z_ref, out.h, old_out.h, model.se_z, model.se_h)
        report.ad = l_ad.item()
    if old is not None and parts & {"kd", "bkd"}:
        p_hat = hat_phi(ad.softmax(out.logits, axis=-3), step_cfg)
        l_b, l_n = kd_terms(p_hat, old_out.probs, step_cfg)
        g = gamma(old_out.probs, step_cfg, cfg.gamma_max).value if "bkd" in parts else 1.0
        l_d = ad.add(ad.mul(l_b, g), l_n)
        report.l_b, report.l_n, report.gamma, report.d = l_b.item(), l_n.item(), g, l_d.item()
    total = total_loss(seg, l_ad, l_d, cfg.lambda_ad, cfg.lambda_d)
    report.total = total.item()
    return total, report


def train_step(model: ModelState, old: ModelState | None, batch: tuple[np.ndarray, np.ndarray],
               cfg: TrainConfig, scenario: Scenario, step: int, optimizer: SGD,
               parts: frozenset[str] = frozenset({"caf", "ad", "bkd"}),
               old_out: OldOut | None = None) -> LossReport:
    """One SGD update. ``batch`` labels must already be remapped for ``step``."""
    x, labels = batch
    total, report = compute_losses(model, old, x, labels, cfg, scenario.step_config(step), parts, old_out)
    if not math.isfinite(report.total):
        raise FloatingPointError(f"non-finite loss at step {step}: {report}")
    model.zero_grad()
    ad.backward(total)
    optimizer.step()
    return report


# ---------------------------------------------------------------- evaluation


def evaluate(model: ModelState, dataset: Dataset, scenario: Scenario, step: int,
             mode=FusionMode.TEST_SKIP, old: ModelState | None = None,
             batch_size: int = 50) -> ConfusionMatrix:
    k = max(scenario.classes) + 1
    cm = ConfusionMatrix(k)
    for start in range(0, len(dataset), batch_size):
        idx = range(start, min(start + batch_size, len(dataset)))
        pred = predict(model, dataset.float_images(idx), mode, old)
        for j, i in enumerate(idx):
            cm.update(pred[j], eval_labels(dataset.masks[i], scenario, step))
    return cm


def summarize(cm: ConfusionMatrix, scenario: Scenario, step: int) -> dict[str, float]:
    return {
        "old": cm.miou(scenario.old_group()),
        "new": cm.miou(scenario.new_group(step)),
        "all": cm.miou(scenario.seen_after(step)),
    }


# ---------------------------------------------------------------- experiment


@dataclass
class StepResult:
    step: int
    per_class: dict[int, float]
    summary: dict[str, float]
    losses: list[LossReport] = field(default_factory=list)


class ReportWriter:
    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.per_class: list[tuple] = []
        self.summary: list[tuple] = []
        self.fusion: list[tuple] = []

    def add_step(self, result: StepResult) -> None:
        for cid, v in result.per_class.items():
            self.per_class.append((result.step, cid, format_value(v)))
        for g in ("old", "new", "all"):
            self.summary.append((result.step, g, format_value(result.summary[g])))
        self.flush()

    def add_fusion(self, step: int, epoch: int, mode: str, summary: dict[str, float]) -> None:
        for g in ("old", "new", "all"):
            self.fusion.append((step, epoch, mode, g, format_value(summary[g])))

    def _write(self, name: str, header, rows) -> None:
        path = self.out_dir / name
        tmp = path.with_name(name + ".tmp")
        with open(tmp, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        os.replace(tmp, path)

    def flush(self) -> None:
        self._write("per_class.csv", ("step", "class_id", "iou"), self.per_class)
        self._write("summary.csv", ("step", "group", "miou"), self.summary)
        if self.fusion:
            self._write("fusion_modes.csv", ("step", "epoch", "mode", "group", "miou"), self.fusion)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s : s + batch_size]


def train_one_step(lineage: ModelLineage, train: Dataset, val: Dataset, scenario: Scenario,
                   cfg: TrainConfig, parts: frozenset[str], writer: ReportWriter | None = None,
                   step_label: int | None = None) -> list[LossReport]:
    step = lineage.step
    model, old = lineage.current, lineage.previous
    idx = filter_step(train.masks, scenario, step)
    x_all = train.float_images(idx)
    y_all = np.stack([remap_labels(train.masks[i], scenario, step) for i in idx])
    epochs = cfg.epochs_for_step(step)
    iters = epochs * math.ceil(len(idx) / cfg.batch_size)
    opt = SGD(model.parameters(), cfg.lr_for_step(step), cfg.momentum, cfg.weight_decay,
              iters, cfg.poly_power, cfg.grad_clip)
    old_cache = None
    if old is not None:
        oo = forward_old(old, Tensor(x_all))
        old_cache = (oo.z.data, oo.h.data, oo.probs.data, oo.z_bar.data)
    log.info("step %d: %d training images, %d epochs, lr %.0e", step, len(idx), epochs, opt.base_lr)
    reports = []
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng([cfg.seed, step, epoch])
        for b in _batches(len(idx), cfg.batch_size, rng):
            oo = None
            if old_cache is not None:
                oo = OldOut(*(Tensor(a[b]) for a in old_cache))
            reports.append(train_step(model, old, (x_all[b], y_all[b]), cfg, scenario, step,
                                      opt, parts, oo))
        if writer is not None and old is not None and cfg.snapshot_every and (
            epoch == 1 or epoch % cfg.snapshot_every == 0 or epoch == epochs
        ):
            for name in ("skip", "zeropad", "concat"):
                cm = evaluate(model, val, scenario, step, FusionMode.from_cli(name), old)
                writer.add_fusion(step_label or step, epoch, name, summarize(cm, scenario, step))
    return reports


def run_experiment(scenario: Scenario, train: Dataset, val: Dataset, cfg: TrainConfig,
                   variant: str, out_dir=None, initial: ModelState | None = None) -> list[StepResult]:
    """Train every step (filter, remap, train, evaluate, advance).

    Writes ``per_class.csv``, ``summary.csv`` (and ``fusion_modes.csv`` when
    snapshots are enabled) plus one checkpoint per step under ``out_dir``.
    ``initial`` optionally supplies an already-trained step-1 model, which is
    then only evaluated.
    """
    parts = parse_variant(variant)
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(
            cfg.to_text() + f"variant = {variant}\nscenario = {scenario.serialize()}\n")
        writer = ReportWriter(out_dir)
    mode = FusionMode.from_cli(cfg.fusion_mode)
    results = []

    if "joint" in parts:
        joint = Scenario("joint", (scenario.classes,), "overlapped", scenario.background_id)
        model = ModelState.init((scenario.background_id,) + scenario.classes, cfg.channels, cfg.seed)
        lineage = ModelLineage(model)
        losses = train_one_step(lineage, train, val, joint, cfg, frozenset())
        final = scenario.num_steps
        cm = evaluate(model, val, scenario, final)
        res = StepResult(final, {c: cm.iou(c) for c in scenario.seen_after(final)},
                         summarize(cm, scenario, final), losses)
        results.append(res)
        if writer:
            writer.add_step(res)
            model.meta["scenario"] = scenario.serialize()
            save_checkpoint(model, out_dir / f"step{final}.ckpt")
        return results

    if initial is not None:
        lineage = ModelLineage(copy_model(initial))
    else:
        lineage = ModelLineage(ModelState.init((scenario.background_id,) + scenario.new_classes(1),
                                               cfg.channels, cfg.seed))
    for step in range(1, scenario.num_steps + 1):
        if step > 1:
            lineage = advance_step(lineage, scenario, cfg.seed, cfg.new_row_std)
        losses = []
        if not (step == 1 and initial is not None):
            try:
                losses = train_one_step(lineage, train, val, scenario, cfg, parts, writer)
            except Exception:
                if writer:
                    writer.flush()
                raise
        # at step 1 there is no previous model, so every mode reduces to skip
        step_mode = mode if lineage.previous is not None else FusionMode.TEST_SKIP
        eval_old = lineage.previous if step_mode.needs_old else None
        cm = evaluate(lineage.current, val, scenario, step, step_mode, eval_old)
        res = StepResult(step, {c: cm.iou(c) for c in scenario.seen_after(step)},
                         summarize(cm, scenario, step), losses)
        results.append(res)
        log.info("step %d: old %.3f new %.3f all %.3f", step, res.summary["old"],
                 res.summary["new"], res.summary["all"])
        if writer:
            writer.add_step(res)
            lineage.current.meta["scenario"] = scenario.serialize()
            save_checkpoint(lineage.current, out_dir / f"step{step}.ckpt")
    return results


def copy_model(model: ModelState) -> ModelState:
    return copy.deepcopy(model)


def train_first_step(scenario: Scenario, train: Dataset, val: Dataset, cfg: TrainConfig) -> ModelState:
    """Train only step 1 (shared by every non-joint variant with the same seed)."""
    lineage = ModelLineage(ModelState.init((scenario.background_id,) + scenario.new_classes(1),
                                           cfg.channels, cfg.seed))
    train_one_step(lineage, train, val, scenario, cfg, frozenset())
    return lineage.current
