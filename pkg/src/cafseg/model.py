"""Toy segmentation network: encoder -> CAF -> refinement -> classifier."""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attentive_distillation import SEWeights
from .autodiff import Parameter, Tensor
from .caf import AttentionPack, CafWeights, FusionMode, caf_forward
from .errors import ProtocolError
from .nonlocal_block import NonLocalWeights
from .protocol import Scenario

ENCODER_WIDTHS = (3, 16, 32)


def _conv_param(name: str, c_out: int, c_in: int, rng, k: int = 3) -> tuple[Parameter, Parameter]:
    fan_in = c_in * k * k
    shape = (c_out, c_in, k, k) if k == 3 else (c_out, c_in)
    return (
        Parameter(f"{name}.w", rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)),
        Parameter(f"{name}.b", np.zeros(c_out)),
    )


@dataclass
class ModelState:
    channels: int
    encoder: list[tuple[Parameter, Parameter]]
    nl: NonLocalWeights
    caf: CafWeights
    refine: list[tuple[Parameter, Parameter]]
    cls_w: Parameter
    cls_b: Parameter
    se_z: SEWeights
    se_h: SEWeights
    classes: tuple[int, ...] = ()
    step: int = 1
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, classes, channels: int = 32, seed: int = 0) -> "ModelState":
        rng = np.random.default_rng(seed)
        widths = (*ENCODER_WIDTHS, channels)
        encoder = [_conv_param(f"enc{i}", widths[i + 1], widths[i], rng) for i in range(3)]
        nl = NonLocalWeights.init("caf.nl", channels, rng)
        caf = CafWeights.init("caf", channels, rng)
        refine = [_conv_param(f"ref{i}", channels, channels, rng) for i in range(2)]
        classes = tuple(classes)
        cls_w = Parameter("cls.w", rng.normal(0.0, np.sqrt(1.0 / channels), (len(classes), channels)))
        cls_b = Parameter("cls.b", np.zeros(len(classes)))
        return cls(channels, encoder, nl, caf, refine, cls_w, cls_b,
                   SEWeights.init("se_z", channels, rng), SEWeights.init("se_h", channels, rng),
                   classes, 1)

    def named_parameters(self) -> list[Parameter]:
        out = [p for pair in self.encoder for p in pair]
        out += self.nl.parameters() + self.caf.parameters()
        out += [p for pair in self.refine for p in pair]
        out += [self.cls_w, self.cls_b]
        out += self.se_z.parameters() + self.se_h.parameters()
        return out

    def parameters(self) -> list[Parameter]:
        return self.named_parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.named_parameters():
            if p.name not in state:
                raise KeyError(f"missing tensor {p.name}")
            value = np.asarray(state[p.name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{p.name}: shape {value.shape} != {p.shape}")
            p.data = value.copy()
            p.grad = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        ad.zero_grads(self.named_parameters())

    def frozen_copy(self) -> "ModelState":
        clone = copy.deepcopy(self)
        for p in clone.named_parameters():
            p.requires_grad = False
            p.grad = np.zeros_like(p.data)
        return clone

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.named_parameters():
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


@dataclass
class ForwardOut:
    logits: Tensor
    z: Tensor
    z_bar: Tensor
    h: Tensor
    pack: AttentionPack


@dataclass
class OldOut:
    z: Tensor
    h: Tensor
    probs: Tensor
    z_bar: Tensor | None = None


INPUT_MEAN = 0.5
INPUT_SCALE = 4.0


def encode(model: ModelState, x: Tensor) -> Tensor:
    out = ad.mul(ad.sub(x, INPUT_MEAN), INPUT_SCALE)
    for i, (w, b) in enumerate(model.encoder):
        out = ad.relu(ad.conv3x3(out, w, b))
        if i < 2:
            out = ad.avg_pool2(out)
    return out


def head(model: ModelState, z_bar: Tensor, size) -> tuple[Tensor, Tensor]:
    h = z_bar
    for w, b in model.refine:
        h = ad.relu(ad.conv3x3(h, w, b))
    logits = ad.upsample_bilinear(ad.conv1x1(h, model.cls_w, model.cls_b), size)
    return h, logits


def forward(model: ModelState, x, mode=FusionMode.TEST_SKIP, old: ModelState | None = None,
            old_out: OldOut | None = None) -> tuple[ForwardOut, OldOut | None]:
    """Run the current model; with ``old`` also run the frozen previous model
    (no graph) and feed its encoder features to the fusion branch."""
    x = ad.as_tensor(x)
    mode = FusionMode(mode)
    if mode.needs_old and old is None:
        raise ProtocolError(f"fusion mode {mode.value} needs the previous-step model")
    if old is not None and old_out is None:
        old_out = forward_old(old, x)
    z = encode(model, x)
    z_old = old_out.z if (old_out is not None and mode.needs_old) else None
    nl_old = old.nl if old is not None else model.nl
    z_bar, pack = caf_forward(z, z_old, model.nl, nl_old, model.caf, mode)
    h, logits = head(model, z_bar, x.shape[-2:])
    return ForwardOut(logits, z, z_bar, h, pack), old_out


def forward_old(old: ModelState, x: Tensor) -> OldOut:
    with ad.no_grad():
        z = encode(old, x)
        z_bar, _ = caf_forward(z, None, old.nl, old.nl, old.caf, FusionMode.TEST_SKIP)
        h, logits = head(old, z_bar, x.shape[-2:])
        probs = ad.softmax(logits, axis=-3)
    return OldOut(z, h, probs, z_bar)


def predict(model: ModelState, x, mode=FusionMode.TEST_SKIP, old: ModelState | None = None) -> np.ndarray:
    """Per-pixel global class ids."""
    with ad.no_grad():
        out, _ = forward(model, x, mode, old if FusionMode(mode).needs_old else None)
    idx = out.logits.data.argmax(axis=-3)
    return np.asarray(model.classes)[idx]


@dataclass
class ModelLineage:
    current: ModelState
    previous: ModelState | None = None
    step: int = 1

    def __post_init__(self):
        if (self.previous is None) != (self.step == 1):
            raise ProtocolError("previous model must be present exactly when step > 1")


def advance_step(lineage: ModelLineage, scenario: Scenario, seed: int = 0,
                 init_std: float = 0.01) -> ModelLineage:
    """Freeze the current model and grow the classifier for the next step.

    New classifier rows are seeded Gaussian; the fusion convolution and the
    SE weights are re-initialised; everything else carries over."""
    nxt = lineage.step + 1
    if nxt > scenario.num_steps:
        raise ProtocolError(f"cannot advance past step {scenario.num_steps} of {scenario.name}")
    previous = lineage.current.frozen_copy()
    cur = copy.deepcopy(lineage.current)
    new_classes = scenario.new_classes(nxt)
    rng = np.random.default_rng([seed, nxt])
    c = cur.channels
    cur.cls_w = Parameter("cls.w", np.concatenate(
        [cur.cls_w.data, rng.normal(0.0, init_std, (len(new_classes), c))]))
    cur.cls_b = Parameter("cls.b", np.concatenate([cur.cls_b.data, np.zeros(len(new_classes))]))
    fresh = CafWeights.init("caf", c, rng)
    cur.caf.w_fuse, cur.caf.b_fuse = fresh.w_fuse, fresh.b_fuse
    cur.se_z = SEWeights.init("se_z", c, rng)
    cur.se_h = SEWeights.init("se_h", c, rng)
    cur.classes = cur.classes + tuple(new_classes)
    cur.step = nxt
    cur.zero_grad()
    return ModelLineage(cur, previous, nxt)
