"""Tanimoto similarity family and the masked multi-task loss.

For label ``y`` and prediction ``p`` (sums run over the reduced axes)::

    T^d(y, p)  = <y,p> / (2^d (<y,y> + <p,p>) - (2^(d+1) - 1) <y,p>)
    FT^d(y, p) = (T^d(y, p) + T^d(1 - y, 1 - p)) / 2
    loss       = 1 - FT^d

The denominator is floored at ``eps``; when it is exactly zero (both inputs
all zero) the coefficient is defined as 1, perfect agreement on emptiness.
Ordinary inputs are evaluated without any stabiliser bias.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

EPS = 1e-7


@dataclass(frozen=True)
class TanimotoConfig:
    d: int = 0
    average_over_depths: bool = False
    epsilon: float = EPS

    def __post_init__(self):
        if self.d < 0:
            raise ValueError("depth d must be >= 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def depths(self) -> tuple[int, ...]:
        return tuple(range(self.d + 1)) if self.average_over_depths else (self.d,)


class UnsupervisableBatchError(ValueError):
    """Raised when a supervision mask selects no pixel."""


def _sum(x, dims):
    if isinstance(x, torch.Tensor):
        return x.sum(dim=dims) if dims is not None else x.sum()
    return np.sum(x, axis=dims)


def tanimoto(y, p, d: int = 0, dims=None, eps: float = EPS):
    """T^d over ``dims`` (all axes when None); numpy arrays or torch tensors."""
    if d < 0:
        raise ValueError("depth d must be >= 0")
    if tuple(y.shape) != tuple(p.shape):
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(p.shape)}")
    tpl = _sum(y * p, dims)
    sq = _sum(y * y, dims) + _sum(p * p, dims)
    scale = 2.0 ** d
    denom = scale * sq - (2.0 * scale - 1.0) * tpl
    # only an exactly empty pair counts as agreement; NaN must propagate
    if isinstance(denom, torch.Tensor):
        return torch.where(denom <= 0, torch.ones_like(denom), tpl / denom.clamp(min=eps))
    with np.errstate(invalid="ignore"):
        return np.where(denom <= 0, 1.0, tpl / np.maximum(denom, eps))


def fractal_tanimoto(y, p, d: int = 0, dims=None, eps: float = EPS):
    """Mean of T^i for i = 0..d."""
    acc = tanimoto(y, p, 0, dims, eps)
    for i in range(1, d + 1):
        acc = acc + tanimoto(y, p, i, dims, eps)
    return acc / (d + 1)


def tanimoto_with_complement(y, p, d: int = 0, dims=None, eps: float = EPS):
    return 0.5 * (tanimoto(y, p, d, dims, eps) + tanimoto(1 - y, 1 - p, d, dims, eps))


def _ftc(y, p, cfg: TanimotoConfig, dims=None):
    vals = [tanimoto_with_complement(y, p, i, dims, cfg.epsilon) for i in cfg.depths]
    return sum(vals) / len(vals)


TASKS = ("extent", "boundary", "distance")


def masked_loss(predictions, labels, cfg: TanimotoConfig = TanimotoConfig(), weights=(1.0, 1.0, 1.0)):
    """Weighted sum over tasks of ``1 - FT(mask*label, mask*pred)``.

    ``predictions`` is (B,3,H,W) or (3,H,W); ``labels`` is (B,4,H,W) or (4,H,W)
    with planes extent, boundary, distance, mask. Sums pool the whole batch.
    Pixels where mask = 0 contribute nothing, so the gradient there is zero.
    """
    if predictions.shape[-3] != 3 or labels.shape[-3] != 4:
        raise ValueError("expected 3 prediction planes and 4 label planes")
    if tuple(predictions.shape[-2:]) != tuple(labels.shape[-2:]):
        raise ValueError("predictions and labels are not aligned")
    mask = labels[..., 3:4, :, :]
    if not bool((mask != 0).any()):
        raise UnsupervisableBatchError("unsupervisable batch: supervision mask is empty")
    y = labels[..., 0:3, :, :] * mask
    p = predictions * mask
    total = 0.0
    for t, w in enumerate(weights):
        if w == 0:
            continue
        yt = y[..., t, :, :]
        pt = p[..., t, :, :]
        # the complement term must also ignore masked pixels
        mt = mask[..., 0, :, :]
        ft = 0.5 * (_t_sum(yt, pt, cfg) + _t_sum(mt - yt, mt - pt, cfg))
        total = total + w * (1.0 - ft)
    return total


def _t_sum(y, p, cfg: TanimotoConfig):
    vals = [tanimoto(y, p, i, None, cfg.epsilon) for i in cfg.depths]
    return sum(vals) / len(vals)
