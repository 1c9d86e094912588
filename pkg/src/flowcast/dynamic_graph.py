"""Learned time-varying adjacency and diffusion over it.

The adjacency for a time slot comes from contracting a small core tensor with
three embeddings (time slot, edge-source node, edge-target node), followed by
ReLU and a row softmax, so every row is a distribution over neighbors. The
contraction is staged (slot first, then nodes) instead of the cubic brute
force; a test pins the two routes against each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError


@dataclass
class DynamicGraphParams:
    """Trainable pieces of the dynamic graph block.

    e_t: (N_t, D_g) one row per time slot of the day
    e_s: (N, D_g) target-side node embedding
    e_e: (N, D_g) source-side node embedding
    k:   (D_g, D_g, D_g) core tensor coupling the three
    w_in: (C, D) input projection
    w_hops: L+1 maps of (D, D), one per diffusion hop including hop 0
    """

    e_t: T.Tensor
    e_s: T.Tensor
    e_e: T.Tensor
    k: T.Tensor
    w_in: T.Tensor
    w_hops: list[T.Tensor]


def dynamic_adjacency_batch(slots, params: DynamicGraphParams) -> T.Tensor:
    """Row-stochastic (U, N, N) adjacency stack for an array of slot indices."""
    slots = np.atleast_1d(np.asarray(slots, dtype=np.int64))
    n_t = params.e_t.shape[0]
    if slots.size and (slots.min() < 0 or slots.max() >= n_t):
        raise IndexError(f"slot indices outside [0, {n_t})")
    d_g = params.k.shape[0]
    et = T.gather_rows(params.e_t, slots)                      # (U, D_g)
    core = T.reshape(params.k, (d_g, d_g * d_g))
    m1 = T.reshape(T.matmul(et, core), (slots.size, d_g, d_g))  # (U, D_g, D_g)
    b = T.matmul(params.e_e, m1)                                # (U, N, D_g)
    raw = T.matmul(b, T.transpose(params.e_s, (1, 0)))          # (U, N, N)
    return T.softmax_rows(T.relu(raw))


def dynamic_adjacency(slot: int, params: DynamicGraphParams) -> T.Tensor:
    """Row-stochastic (N, N) adjacency for one time slot."""
    batch = dynamic_adjacency_batch(np.array([slot]), params)
    n = batch.shape[-1]
    return T.reshape(batch, (n, n))


def graph_propagate(x: T.Tensor, adjacency: T.Tensor,
                    params: DynamicGraphParams) -> T.Tensor:
    """Diffusion given explicit adjacency: H_0 = x W_in, H_{l+1} = A H_l,
    output = sum_l H_l W_l."""
    if x.shape[-1] != params.w_in.shape[0]:
        raise DimensionError(
            f"input channels {x.shape[-1]} do not match W_in rows {params.w_in.shape[0]}")
    h = T.matmul(x, params.w_in)
    out = T.matmul(h, params.w_hops[0])
    for w in params.w_hops[1:]:
        h = T.matmul(adjacency, h)
        out = out + T.matmul(h, w)
    return out


def dynamic_graph_conv(x: T.Tensor, tod, params: DynamicGraphParams) -> T.Tensor:
    """Slot-conditioned diffusion over an input window.

    x is (T, N, C) with tod (T,), or batched (B, T, N, C) with tod (B, T).
    Each distinct slot's adjacency is built once and shared across the steps
    that use it. Returns (..., T, N, D).
    """
    tod = np.asarray(tod, dtype=np.int64)
    if x.ndim not in (3, 4) or tod.shape != x.shape[:-2]:
        raise DimensionError(
            f"window shape {x.shape} does not pair with slot shape {tod.shape}")
    unique, inverse = np.unique(tod.reshape(-1), return_inverse=True)
    stack = dynamic_adjacency_batch(unique, params)   # (U, N, N)
    per_step = T.gather_rows(stack, inverse)          # (B*T, N, N)
    n = x.shape[-2]
    adjacency = T.reshape(per_step, tod.shape + (n, n))
    return graph_propagate(x, adjacency, params)
