"""Calendar-time embeddings and their fusion with node embeddings.

Each step's (time-of-day, day-of-week) pair is one-hot encoded, linearly
mapped, rectified, then squashed through a small bias-free MLP ending in a
sigmoid, giving per-step features in (0, 1). Fusion broadcasts step features
against node features: sine of the temporal part plus ReLU of the spatial
part, optionally as a trainable convex blend.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError


@dataclass
class TemporalEmbeddingParams:
    """w_in: (steps_per_day + 7, D) one-hot projection; w1, w2: (D, D) refit
    maps. All bias-free."""

    w_in: T.Tensor
    w1: T.Tensor
    w2: T.Tensor

    @property
    def steps_per_day(self) -> int:
        return self.w_in.shape[0] - 7


def one_hot_calendar(tod, dow, steps_per_day: int) -> np.ndarray:
    """(L, steps_per_day + 7) rows with exactly two ones each."""
    tod = np.asarray(tod, dtype=np.int64)
    dow = np.asarray(dow, dtype=np.int64)
    if tod.shape != dow.shape or tod.ndim != 1:
        raise DimensionError(
            f"calendar index shapes disagree: {tod.shape} vs {dow.shape}")
    if tod.size and (tod.min() < 0 or tod.max() >= steps_per_day):
        raise IndexError(f"time-of-day index outside [0, {steps_per_day})")
    if dow.size and (dow.min() < 0 or dow.max() >= 7):
        raise IndexError("day-of-week index outside [0, 7)")
    out = np.zeros((tod.size, steps_per_day + 7))
    out[np.arange(tod.size), tod] = 1.0
    out[np.arange(dow.size), steps_per_day + dow] = 1.0
    return out


def initial_temporal_embedding(tod, dow,
                               params: TemporalEmbeddingParams) -> T.Tensor:
    """relu(onehot(tod) || onehot(dow) times w_in), one row per step."""
    onehot = one_hot_calendar(tod, dow, params.steps_per_day)
    return T.relu(T.matmul(T.Tensor(onehot), params.w_in))


def refine_temporal_embedding(z: T.Tensor,
                              params: TemporalEmbeddingParams) -> T.Tensor:
    """sigmoid(relu(z w1) w2); outputs in (0, 1)."""
    if z.shape[-1] != params.w1.shape[0]:
        raise DimensionError(
            f"embedding width {z.shape[-1]} does not match w1 rows {params.w1.shape[0]}")
    return T.sigmoid(T.matmul(T.relu(T.matmul(z, params.w1)), params.w2))


def temporal_embedding(tod, dow, params: TemporalEmbeddingParams) -> T.Tensor:
    """Full per-step temporal embedding: one-hot, project, refine. (L, D)."""
    return refine_temporal_embedding(initial_temporal_embedding(tod, dow, params),
                                     params)


def fuse(m_t: T.Tensor, m_s: T.Tensor, alpha: Optional[T.Tensor] = None) -> T.Tensor:
    """Blend step features (..., T, D) with node features (N, D) into
    (..., T, N, D).

    Default: sin(m_t) + relu(m_s), broadcast over the missing axis each.
    With a trainable scalar ``alpha``: alpha * sin(m_t) + (1 - alpha) * relu(m_s).
    """
    if m_t.ndim < 2 or m_s.ndim != 2:
        raise DimensionError(f"fuse expects (..., T, D) and (N, D), got "
                             f"{m_t.shape}, {m_s.shape}")
    if m_t.shape[-1] != m_s.shape[1]:
        raise DimensionError(
            f"embedding widths disagree: temporal {m_t.shape[-1]}, spatial {m_s.shape[1]}")
    *lead, t_steps, d = m_t.shape
    n = m_s.shape[0]
    sine = T.reshape(T.sin(m_t), (*lead, t_steps, 1, d))
    rect = T.reshape(T.relu(m_s), (1, n, d))
    if alpha is None:
        return sine + rect
    if alpha.size != 1:
        raise ContractError(f"alpha must be scalar, got shape {alpha.shape}")
    return alpha * sine + (1.0 - alpha) * rect
