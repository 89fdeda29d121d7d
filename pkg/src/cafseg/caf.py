"""Continual attentive fusion: fuse current and previous projected features,
derive channel/spatial attention and reweight the fused map residually."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import DimensionError, ProtocolError
from .nonlocal_block import NonLocalWeights, nonlocal_forward

log = logging.getLogger(__name__)


class FusionMode(str, enum.Enum):
    TRAIN_FUSE = "train_fuse"
    TEST_SKIP = "test_skip"
    TEST_ZERO_PAD = "test_zero_pad"
    TEST_CONCAT = "test_concat"

    @property
    def needs_old(self) -> bool:
        return self in (FusionMode.TRAIN_FUSE, FusionMode.TEST_CONCAT)

    @classmethod
    def from_cli(cls, name: str) -> "FusionMode":
        table = {"skip": cls.TEST_SKIP, "zeropad": cls.TEST_ZERO_PAD, "concat": cls.TEST_CONCAT}
        try:
            return table[name]
        except KeyError:
            return cls(name)


@dataclass
class CafWeights:
    w_fuse: Parameter  # [C, 2C], input order (old, new)
    b_fuse: Parameter
    w_sp: Parameter
    b_sp: Parameter
    w_ch: Parameter
    b_ch: Parameter

    @classmethod
    def init(cls, prefix: str, channels: int, rng: np.random.Generator):
        c = channels
        s = np.sqrt(2.0 / (9 * c))
        # fusion starts as a pass-through of the new branch
        eye = np.eye(c)
        w_fuse = np.concatenate([np.zeros((c, c)), eye], axis=1)
        w_fuse += rng.normal(0.0, 0.01, w_fuse.shape)
        return cls(
            Parameter(f"{prefix}.fuse.w", w_fuse),
            Parameter(f"{prefix}.fuse.b", np.zeros(c)),
            Parameter(f"{prefix}.sp.w", rng.normal(0.0, s, (c, c, 3, 3))),
            Parameter(f"{prefix}.sp.b", np.zeros(c)),
            Parameter(f"{prefix}.ch.w", rng.normal(0.0, s, (c, c, 3, 3))),
            Parameter(f"{prefix}.ch.b", np.zeros(c)),
        )

    def parameters(self) -> list[Parameter]:
        return [self.w_fuse, self.b_fuse, self.w_sp, self.b_sp, self.w_ch, self.b_ch]


@dataclass
class AttentionPack:
    a_ch: Tensor
    a_sp: Tensor
    a_str: Tensor


def fuse(v_new: Tensor, v_old: Tensor, w: CafWeights) -> Tensor:
    if v_new.shape != v_old.shape:
        raise DimensionError(f"fuse: shape mismatch, new {v_new.shape} vs old {v_old.shape}")
    stacked = ad.concat([v_old.detach(), v_new], axis=-3)
    return ad.conv1x1(stacked, w.w_fuse, w.b_fuse)


def spatial_attention(v: Tensor, w: CafWeights) -> Tensor:
    return ad.channel_avg(ad.conv3x3(v, w.w_sp, w.b_sp))


def channel_attention(v: Tensor, w: CafWeights) -> Tensor:
    return ad.global_avg_pool(ad.conv3x3(v, w.w_ch, w.b_ch))


def structured_attention(a_ch: Tensor, a_sp: Tensor) -> Tensor:
    """Outer product ``a_str[..., c, w, h] = a_ch[..., c] * a_sp[..., w, h]``."""
    ch = ad.reshape(a_ch, (*a_ch.shape, 1, 1))
    sp = ad.reshape(a_sp, (*a_sp.shape[:-2], 1, *a_sp.shape[-2:]))
    return ad.mul(ch, sp)


def caf_forward(
    z_new: Tensor,
    z_old: Tensor | None,
    nl_new: NonLocalWeights,
    nl_old: NonLocalWeights,
    weights: CafWeights,
    mode: FusionMode,
) -> tuple[Tensor, AttentionPack]:
    mode = FusionMode(mode)
    if mode.needs_old and z_old is None:
        raise ProtocolError(f"fusion mode {mode.value} requires previous-step features")
    if not mode.needs_old and z_old is not None:
        log.warning("fusion mode %s ignores the supplied previous-step features", mode.value)
    v_new = nonlocal_forward(z_new, nl_new)
    if mode.needs_old:
        v_old = nonlocal_forward(z_old.detach(), nl_old)
        v_in = fuse(v_new, v_old, weights)
    elif mode is FusionMode.TEST_ZERO_PAD:
        v_in = fuse(v_new, Tensor(np.zeros(v_new.shape)), weights)
    else:
        v_in = v_new
    a_sp = spatial_attention(v_in, weights)
    a_ch = channel_attention(v_in, weights)
    a_str = structured_attention(a_ch, a_sp)
    z_bar = ad.mul(ad.add(a_str, 1.0), v_in)
    return z_bar, AttentionPack(a_ch, a_sp, a_str)
