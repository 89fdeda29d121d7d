"""Background-aware remappings and the supervised / distillation losses."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ProtocolError

log = logging.getLogger(__name__)

IGNORE_ID = 255
LOG_CLAMP = 1e-12
LAMBDA_AD = 1000.0
LAMBDA_D = 10.0
GAMMA_MAX = 1e4


@dataclass(frozen=True)
class StepConfig:
    """Class bookkeeping for one incremental step.

    ``old_classes`` is S_{l-1} (contains the background once l >= 2) and
    ``new_classes`` is U_l. Channel order of the current classifier is
    ``seen_classes`` = old followed by new, each in ascending id order.
    """

    old_classes: tuple[int, ...]
    new_classes: tuple[int, ...]
    background_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "old_classes", tuple(self.old_classes))
        object.__setattr__(self, "new_classes", tuple(self.new_classes))
        if set(self.old_classes) & set(self.new_classes):
            raise ProtocolError("new classes overlap the seen classes")
        if self.background_id in self.new_classes:
            raise ProtocolError("background cannot be a new class")

    @classmethod
    def first(cls, classes, background_id: int = 0) -> "StepConfig":
        """Step 1: only the background is 'seen' beforehand."""
        return cls((background_id,), tuple(c for c in classes if c != background_id), background_id)

    @property
    def seen_classes(self) -> tuple[int, ...]:
        return self.old_classes + self.new_classes

    def channel(self, class_id: int) -> int:
        return self.seen_classes.index(class_id)


def _aggregation(sources: tuple[int, ...], groups: list[list[int]]) -> np.ndarray:
    m = np.zeros((len(groups), len(sources)))
    for o, members in enumerate(groups):
        for cid in members:
            m[o, sources.index(cid)] = 1.0
    return m


def tilde_matrix(cfg: StepConfig) -> np.ndarray:
    bg = cfg.background_id
    groups = [[bg] + [s for s in cfg.old_classes if s != bg]] + [[u] for u in cfg.new_classes]
    return _aggregation(cfg.seen_classes, groups)


def hat_matrix(cfg: StepConfig) -> np.ndarray:
    bg = cfg.background_id
    groups = [[bg] + list(cfg.new_classes) if s == bg else [s] for s in cfg.old_classes]
    return _aggregation(cfg.seen_classes, groups)


def tilde_phi(p: Tensor, cfg: StepConfig) -> Tensor:
    """Fold every previously seen class into the background.

    Output channels: background, then the new classes."""
    return ad.conv1x1(p, Tensor(tilde_matrix(cfg)))


def hat_phi(p: Tensor, cfg: StepConfig) -> Tensor:
    """Fold the new classes into the background; output over S_{l-1}."""
    return ad.conv1x1(p, Tensor(hat_matrix(cfg)))


def _tilde_targets(labels: np.ndarray, cfg: StepConfig) -> np.ndarray:
    allowed = [cfg.background_id, *cfg.new_classes]
    lut = np.full(256, -1, dtype=np.int64)
    for i, cid in enumerate(allowed):
        lut[cid] = i
    lut[IGNORE_ID] = -2
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        bad = np.argwhere((labels < 0) | (labels > 255))[0]
        raise ProtocolError(f"label id out of range at pixel {tuple(bad)}")
    targets = lut[labels]
    if (targets == -1).any():
        bad = tuple(int(i) for i in np.argwhere(targets == -1)[0])
        raise ProtocolError(f"label {int(labels[bad])} at pixel {bad} is not in background/new classes {allowed}")
    return targets


def seg_loss(logits: Tensor, labels: np.ndarray, cfg: StepConfig) -> Tensor:
    """Pixel cross-entropy on tilde-phi probabilities, ignoring label 255.

    ``logits`` is [K, W, H] or [B, K, W, H]; ``labels`` matches without K.
    The mean is over every valid pixel in the batch."""
    targets = _tilde_targets(labels, cfg)
    probs = tilde_phi(ad.softmax(logits, axis=-3), cfg)
    logp = ad.log(probs, LOG_CLAMP)
    valid = targets >= 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        return ad.mul(ad.sum_(logp), 0.0)
    onehot = np.zeros(logp.shape)
    tgt = np.where(valid, targets, 0)
    np.put_along_axis(onehot, np.expand_dims(tgt, -3), np.expand_dims(valid, -3) * 1.0, axis=-3)
    return ad.mul(ad.sum_(ad.mul(logp, onehot)), -1.0 / n_valid)


def kd_terms(p_new_hat: Tensor, p_old: Tensor, cfg: StepConfig) -> tuple[Tensor, Tensor]:
    """Background and non-background parts of the distillation cross-entropy.

    Both are scaled by -1/(HW) per image and averaged over a batch axis."""
    bg = cfg.old_classes.index(cfg.background_id)
    k = p_old.shape[-3]
    w, h = p_old.shape[-2:]
    logq = ad.log(p_new_hat, LOG_CLAMP)
    weighted = ad.mul(logq, p_old.data)
    per_class = ad.sum_(weighted, axis=(-2, -1))  # [..., K]
    bg_mask = np.zeros(k)
    bg_mask[bg] = 1.0
    beta = -1.0 / (w * h)
    l_b = ad.mul(ad.sum_(ad.mul(per_class, bg_mask), axis=-1), beta)
    l_n = ad.mul(ad.sum_(ad.mul(per_class, 1.0 - bg_mask), axis=-1), beta)
    return ad.mean(l_b), ad.mean(l_n)


@dataclass
class GammaResult:
    value: float
    per_image: np.ndarray = field(repr=False)
    degenerate: bool = False


def gamma(p_old: Tensor | np.ndarray, cfg: StepConfig, gamma_max: float = GAMMA_MAX) -> GammaResult:
    """Ratio of softmax-pooled old-class mass to background mass.

    Softmax runs over the class axis of the spatially pooled probabilities;
    per-image values are averaged over the batch. Never differentiated."""
    data = p_old.data if isinstance(p_old, Tensor) else np.asarray(p_old, dtype=float)
    pooled = data.mean(axis=(-2, -1))
    pooled = pooled.reshape(-1, pooled.shape[-1])
    q = ad.softmax(Tensor(pooled), axis=-1).data
    bg = cfg.old_classes.index(cfg.background_id)
    q_bg = q[:, bg]
    rest = q.sum(axis=-1) - q_bg
    degenerate = q_bg < 1e-12
    per_image = np.where(degenerate, gamma_max, rest / np.where(degenerate, 1.0, q_bg))
    per_image = np.minimum(per_image, gamma_max)
    if degenerate.any():
        log.warning("gamma: background mass below 1e-12 in %d image(s); clamped", int(degenerate.sum()))
    return GammaResult(float(per_image.mean()), per_image, bool(degenerate.any()))


def balanced_kd(p_new_hat: Tensor, p_old: Tensor, cfg: StepConfig, gamma_max: float = GAMMA_MAX,
                gamma_value: float | None = None) -> tuple[Tensor, float]:
    """gamma * L_B + L_N with gamma held constant. Returns (loss, gamma)."""
    l_b, l_n = kd_terms(p_new_hat, p_old, cfg)
    g = gamma(p_old, cfg, gamma_max).value if gamma_value is None else gamma_value
    return ad.add(ad.mul(l_b, g), l_n), g


def total_loss(seg, ad_loss, d, lambda_ad: float = LAMBDA_AD, lambda_d: float = LAMBDA_D) -> Tensor:
    return ad.add(ad.add(seg, ad.mul(ad_loss, lambda_ad)), ad.mul(d, lambda_d))
