"""Trend/seasonal split of hidden states by a learned mask.

The trend component is the hidden state gated elementwise by the fused
embedding mask; the seasonal component is the residual. After computing
``seasonal = h - h*m``, the trend is recomputed as ``h - seasonal``: by the
Sterbenz lemma one of the two subtractions is exact whenever the mask lies in
[0, 1], so ``trend + seasonal`` then reconstructs ``h`` bit for bit (and to
within one ulp for masks outside the unit interval). The correction shifts
trend by at most one ulp from ``h*m`` and leaves gradients unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import DimensionError


@dataclass
class DecomposedStates:
    trend: T.Tensor
    seasonal: T.Tensor


def decompose(h: T.Tensor, m: T.Tensor) -> DecomposedStates:
    """trend = h * m, seasonal = h - trend, with trend rounded so the pair
    sums back to h exactly. Shapes must match exactly."""
    if h.shape != m.shape:
        raise DimensionError(
            f"hidden states {h.shape} and mask {m.shape} must have equal shapes")
    seasonal = h - h * m
    trend = h - seasonal
    return DecomposedStates(trend=trend, seasonal=seasonal)
