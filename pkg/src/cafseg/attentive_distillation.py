"""Attentive feature distillation: SE channel attention, self spatial
attention, their residual combination and the two-site matching loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import DimensionError

DEGENERATE_NORM = 1e-12


@dataclass
class SEWeights:
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    @classmethod
    def init(cls, prefix: str, channels: int, rng: np.random.Generator):
        cr = se_reduction(channels)
        return cls(
            Parameter(f"{prefix}.w1", rng.normal(0.0, np.sqrt(2.0 / channels), (cr, channels))),
            Parameter(f"{prefix}.b1", np.zeros(cr)),
            Parameter(f"{prefix}.w2", rng.normal(0.0, np.sqrt(1.0 / cr), (channels, cr))),
            Parameter(f"{prefix}.b2", np.zeros(channels)),
        )

    @classmethod
    def zeros(cls, prefix: str, channels: int):
        cr = se_reduction(channels)
        return cls(
            Parameter(f"{prefix}.w1", np.zeros((cr, channels))),
            Parameter(f"{prefix}.b1", np.zeros(cr)),
            Parameter(f"{prefix}.w2", np.zeros((channels, cr))),
            Parameter(f"{prefix}.b2", np.zeros(channels)),
        )

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]


def se_reduction(channels: int) -> int:
    return max(1, channels // 4)


def _dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    # x: [..., K] -> [..., O]
    return ad.add(ad.matmul(x, ad.swapaxes(w, 0, 1)), b)


def ad_channel(m: Tensor, se: SEWeights) -> Tensor:
    """sigmoid(w2 relu(w1 gap(m) + b1) + b2) -> [..., C]."""
    pooled = ad.global_avg_pool(m)
    hidden = ad.relu(_dense(pooled, se.w1, se.b1))
    return ad.sigmoid(_dense(hidden, se.w2, se.b2))


def ad_spatial(m: Tensor, with_flag: bool = False):
    """Channel energy map normalised to unit Frobenius norm -> [..., W, H].

    Maps whose norm is below 1e-12 are returned as zeros; ``with_flag`` also
    returns a boolean array marking those samples.
    """
    s = ad.sum_(ad.square(m), axis=-3)
    norm_sq = np.sum(s.data * s.data, axis=(-2, -1), keepdims=True)
    degenerate = np.sqrt(norm_sq) < DEGENERATE_NORM
    norm = ad.sqrt(ad.sum_(ad.square(s), axis=(-2, -1), keepdims=True) + degenerate * 1.0)
    out = ad.mul(ad.div(s, norm), ~degenerate * 1.0)
    if with_flag:
        return out, degenerate.reshape(degenerate.shape[:-2])
    return out


def ad_combine(m: Tensor, se: SEWeights) -> Tensor:
    """(AD_ch outer AD_sp + 1) * m, elementwise."""
    ch = ad_channel(m, se)
    sp = ad_spatial(m)
    ch = ad.reshape(ch, (*ch.shape, 1, 1))
    sp = ad.reshape(sp, (*sp.shape[:-2], 1, *sp.shape[-2:]))
    return ad.mul(ad.add(ad.mul(ch, sp), 1.0), m)


def _site_loss(new: Tensor, old: Tensor, se: SEWeights) -> Tensor:
    if new.shape != old.shape:
        raise DimensionError(f"loss_ad: shape mismatch, new {new.shape} vs old {old.shape}")
    diff = ad.sub(ad_combine(new, se), ad_combine(old.detach(), se))
    per_sample = ad.mean(ad.square(diff), axis=(-3, -2, -1))
    return ad.mean(per_sample)


def loss_ad(
    z_new: Tensor,
    z_old: Tensor,
    h_new: Tensor,
    h_old: Tensor,
    se_z: SEWeights,
    se_h: SEWeights,
) -> Tensor:
    """Per-element mean squared distance of AD features at the z and h sites,
    averaged over the batch when inputs carry a leading batch axis."""
    return ad.add(_site_loss(z_new, z_old, se_z), _site_loss(h_new, h_old, se_h))
