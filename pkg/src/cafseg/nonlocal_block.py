"""Position-wise self-attention (non-local block) producing projected features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


@dataclass
class NonLocalWeights:
    w_theta: Parameter
    b_theta: Parameter
    w_phi: Parameter
    b_phi: Parameter
    w_g: Parameter
    b_g: Parameter

    @classmethod
    def init(cls, prefix: str, channels: int, rng: np.random.Generator, scale: float | None = None):
        ce = embed_width(channels)
        s = scale if scale is not None else 1.0 / np.sqrt(channels)
        return cls(
            Parameter(f"{prefix}.theta.w", rng.normal(0.0, s, (ce, channels))),
            Parameter(f"{prefix}.theta.b", np.zeros(ce)),
            Parameter(f"{prefix}.phi.w", rng.normal(0.0, s, (ce, channels))),
            Parameter(f"{prefix}.phi.b", np.zeros(ce)),
            Parameter(f"{prefix}.g.w", rng.normal(0.0, s, (channels, channels))),
            Parameter(f"{prefix}.g.b", np.zeros(channels)),
        )

    def parameters(self) -> list[Parameter]:
        return [self.w_theta, self.b_theta, self.w_phi, self.b_phi, self.w_g, self.b_g]


def embed_width(channels: int) -> int:
    return max(1, channels // 2)


def attention_map(z: Tensor, weights: NonLocalWeights) -> Tensor:
    """Row-stochastic [..., P, P] map; row p holds query p's weights over keys."""
    *lead, _, w, h = z.shape
    p = w * h
    theta = ad.conv1x1(z, weights.w_theta, weights.b_theta)
    phi = ad.conv1x1(z, weights.w_phi, weights.b_phi)
    ce = theta.shape[-3]
    theta = ad.reshape(theta, (*lead, ce, p))
    phi = ad.reshape(phi, (*lead, ce, p))
    logits = ad.matmul(ad.swapaxes(theta, -1, -2), phi)
    return ad.softmax(logits, axis=-1)


def nonlocal_forward(z: Tensor, weights: NonLocalWeights) -> Tensor:
    """v[:, p] = sum_q A[p, q] g[:, q]; same shape as ``z``; no residual."""
    *lead, c, w, h = z.shape
    attn = attention_map(z, weights)
    g = ad.conv1x1(z, weights.w_g, weights.b_g)
    g = ad.reshape(g, (*lead, c, w * h))
    v = ad.matmul(g, ad.swapaxes(attn, -1, -2))
    return ad.reshape(v, (*lead, c, w, h))
