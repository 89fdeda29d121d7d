"""Incremental-learning scenarios, per-step data filtering and label remapping."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ProtocolError
from .losses import IGNORE_ID, StepConfig

SETTINGS = ("disjoint", "overlapped")


@dataclass(frozen=True)
class Scenario:
    name: str
    steps: tuple[tuple[int, ...], ...]
    setting: str = "disjoint"
    background_id: int = 0

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ProtocolError(f"unknown setting {self.setting!r}; expected one of {SETTINGS}")
        flat = [c for s in self.steps for c in s]
        if len(flat) != len(set(flat)):
            raise ProtocolError(f"scenario {self.name}: step class lists overlap")
        if self.background_id in flat:
            raise ProtocolError(f"scenario {self.name}: background listed as a new class")

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(c for s in self.steps for c in s)

    def new_classes(self, step: int) -> tuple[int, ...]:
        """U_l for 1-based ``step``."""
        self._check_step(step)
        return self.steps[step - 1]

    def seen_before(self, step: int) -> tuple[int, ...]:
        """S_{l-1}: background plus every class of steps < ``step``."""
        self._check_step(step)
        return (self.background_id,) + tuple(c for s in self.steps[: step - 1] for c in s)

    def seen_after(self, step: int) -> tuple[int, ...]:
        return self.seen_before(step) + self.new_classes(step)

    def future_classes(self, step: int) -> tuple[int, ...]:
        self._check_step(step)
        return tuple(c for s in self.steps[step:] for c in s)

    def step_config(self, step: int) -> StepConfig:
        return StepConfig(self.seen_before(step), self.new_classes(step), self.background_id)

    def old_group(self) -> tuple[int, ...]:
        """Classes reported as 'old': background plus the first step."""
        return (self.background_id,) + self.steps[0]

    def new_group(self, step: int) -> tuple[int, ...]:
        return tuple(c for s in self.steps[1:step] for c in s)

    def serialize(self) -> str:
        groups = ";".join(",".join(str(c) for c in s) for s in self.steps)
        return f"{self.name}|{self.setting}|{groups}"

    @classmethod
    def parse(cls, text: str) -> "Scenario":
        name, setting, groups = text.split("|")
        steps = tuple(tuple(int(c) for c in g.split(",")) for g in groups.split(";"))
        return cls(name, steps, setting)

    def _check_step(self, step: int) -> None:
        if not 1 <= step <= self.num_steps:
            raise ProtocolError(f"step {step} outside 1..{self.num_steps} for scenario {self.name}")


def build_scenario(universe: Sequence[int], spec: str, setting: str = "disjoint",
                   background_id: int = 0) -> Scenario:
    """Parse ``"a-b"`` / ``"a-b-b"`` style specs, assigning classes in ascending id order.

    A trailing group size repeats until the universe is exhausted, so "15-1"
    over 20 classes yields the first 15 then five single-class steps.
    """
    ids = sorted(c for c in set(universe) if c != background_id)
    try:
        sizes = [int(tok) for tok in spec.strip().split("-")]
    except ValueError:
        raise ProtocolError(f"malformed scenario spec {spec!r}") from None
    if not sizes or any(s <= 0 for s in sizes):
        raise ProtocolError(f"malformed scenario spec {spec!r}")
    if sum(sizes) > len(ids):
        raise ProtocolError(f"scenario {spec!r} needs {sum(sizes)} classes, universe has {len(ids)}")
    if sum(sizes) < len(ids):
        if len(sizes) < 2:
            raise ProtocolError(f"scenario {spec!r} leaves classes unassigned")
        rest = len(ids) - sum(sizes)
        if rest % sizes[-1]:
            raise ProtocolError(f"scenario {spec!r} does not tile {len(ids)} classes")
        sizes = sizes + [sizes[-1]] * (rest // sizes[-1])
    steps, pos = [], 0
    for s in sizes:
        steps.append(tuple(ids[pos : pos + s]))
        pos += s
    return Scenario(spec, tuple(steps), setting, background_id)


def filter_step(masks: Sequence[np.ndarray], scenario: Scenario, step: int) -> list[int]:
    """Indices of the images used for training at ``step``."""
    new = np.array(scenario.new_classes(step))
    future = np.array(scenario.future_classes(step), dtype=np.int64)
    keep = []
    for i, m in enumerate(masks):
        present = np.unique(m)
        if not np.isin(new, present).any():
            continue
        if scenario.setting == "disjoint" and future.size and np.isin(future, present).any():
            continue
        keep.append(i)
    if not keep:
        raise ProtocolError(f"step {step} of scenario {scenario.name} ({scenario.setting}) has no images")
    return keep


def remap_labels(mask: np.ndarray, scenario: Scenario, step: int) -> np.ndarray:
    """Old and future classes become background; 255 is preserved."""
    allowed = np.array((scenario.background_id, IGNORE_ID) + scenario.new_classes(step))
    out = mask.copy()
    out[~np.isin(mask, allowed)] = scenario.background_id
    return out


def eval_labels(mask: np.ndarray, scenario: Scenario, step: int) -> np.ndarray:
    """Validation ground truth at ``step``: not-yet-seen classes are ignored."""
    out = mask.copy()
    future = scenario.future_classes(step)
    if future:
        out[np.isin(mask, future)] = IGNORE_ID
    return out
