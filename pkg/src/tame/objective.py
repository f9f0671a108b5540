"""Composite training loss: cross-entropy on the masked pass plus area and variation terms.

All functions accept a single sample (``Classes`` logits, ``H x W`` explanation)
or a batch (``N x Classes``, ``N x H x W``) and then return one value per sample.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from tame.autodiff import Tensor, log_softmax, take_rows
from tame.errors import ConfigError, DomainError, ShapeError

REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True)
class LossWeights:
    """``lambda1`` CE, ``lambda2`` area, ``lambda3`` variation, ``lambda4`` area exponent."""

    lambda1: float = 1.5
    lambda2: float = 2.0
    lambda3: float = 0.01
    lambda4: float = 0.3
    area_reduction: str = "mean"

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0 < self.lambda4 <= 1:
            raise ConfigError("lambda4 must lie in (0, 1]")
        if self.area_reduction not in REDUCTIONS:
            raise ConfigError(f"area_reduction must be one of {REDUCTIONS}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    total: Tensor
    ce: Tensor
    area: Tensor
    variation: Tensor

    def to_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("total", "ce", "area", "variation")}


def cross_entropy(logits: Tensor, label) -> Tensor:
    """``-log softmax(logits)[label]``; per sample for 2-D logits."""
    single = logits.ndim == 1
    z = logits.reshape(1, -1) if single else logits
    idx = np.broadcast_to(np.asarray(label, dtype=np.int64), (z.shape[0],))
    if np.any(idx < 0) or np.any(idx >= z.shape[1]):
        raise ValueError(f"label out of range [0, {z.shape[1]})")
    ce = -take_rows(log_softmax(z), idx)
    return ce.reshape(()) if single else ce


def _check_map(psi: Tensor) -> None:
    if psi.ndim not in (2, 3):
        raise ShapeError(f"explanation must be H x W or N x H x W, got {psi.shape}")


def variation_loss(psi: Tensor) -> Tensor:
    """Sum of squared forward differences along both spatial axes, no wraparound."""
    _check_map(psi)
    if psi.shape[-1] < 2 or psi.shape[-2] < 2:
        raise ShapeError(f"variation loss needs at least 2 x 2 maps, got {psi.shape[-2:]}")
    lead = (slice(None),) * (psi.ndim - 2)
    dv = psi[lead + (slice(1, None), slice(None))] - psi[lead + (slice(None, -1), slice(None))]
    dh = psi[lead + (slice(None), slice(1, None))] - psi[lead + (slice(None), slice(None, -1))]
    return (dv * dv).sum(axis=(-2, -1)) + (dh * dh).sum(axis=(-2, -1))


def _fractional_power(x: Tensor, p: float) -> Tensor:
    # x ** p with the derivative at 0 taken as 0 rather than +inf
    out = x.data ** p
    positive = x.data > 0

    def _bw(g):
        safe = np.where(positive, x.data, 1)
        return (np.where(positive, g * p * safe ** (p - 1.0), 0).astype(g.dtype),)

    return Tensor._result(out, (x,), _bw, "area_pow")


def area_loss(psi: Tensor, lambda4: float, reduction: str = "mean") -> Tensor:
    """Mean (or sum) over pixels of ``psi ** lambda4``."""
    _check_map(psi)
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}")
    if lambda4 <= 0:
        raise DomainError("lambda4 must be positive")
    if np.any(psi.data < 0):
        raise DomainError("area loss got negative explanation values")
    powered = _fractional_power(psi, float(lambda4))
    return powered.mean(axis=(-2, -1)) if reduction == "mean" else powered.sum(axis=(-2, -1))


def total_loss(logits: Tensor, label, psi: Tensor, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted sum of the three terms.  For a batch every field is the mean over samples."""
    ce = cross_entropy(logits, label)
    area = area_loss(psi, weights.lambda4, weights.area_reduction)
    var = variation_loss(psi)
    if ce.shape != area.shape:
        raise ShapeError(f"logits batch {ce.shape} and explanation batch {area.shape} differ")
    total = weights.lambda1 * ce + weights.lambda2 * area + weights.lambda3 * var
    if total.ndim:
        return LossBreakdown(total.mean(), ce.mean(), area.mean(), var.mean())
    return LossBreakdown(total, ce, area, var)
