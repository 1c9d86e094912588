"""Sequence encoder and decoder: GRUs, multi-head attention, bottleneck blocks.

The two decomposition streams run through separate GRUs and are summed (or
blended by a trainable scalar). The decoder refines a learned set of horizon
queries against each node's time sequence: stage one attends from the
inducing queries into the sequence, stage two attends back out, and a final
projection brings the widened features back to model width.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError


# -- GRU ------------------------------------------------------------------------

@dataclass
class GruParams:
    """One gate triple each for update (z), reset (r), and candidate (n)."""

    w_z: T.Tensor
    u_z: T.Tensor
    b_z: T.Tensor
    w_r: T.Tensor
    u_r: T.Tensor
    b_r: T.Tensor
    w_n: T.Tensor
    u_n: T.Tensor
    b_n: T.Tensor


def gru_encode(x: T.Tensor, params: GruParams) -> T.Tensor:
    """Run the recurrence along the time axis, zero initial state.

    x is (T, N, D) or batched (B, T, N, D); the full hidden sequence of the
    same shape comes back. Nodes are independent: each (n) row carries its
    own hidden state.
    """
    d = params.w_z.shape[0]
    if x.ndim < 3 or x.shape[-1] != d:
        raise DimensionError(
            f"GRU input {x.shape} does not match gate width {d}")
    t_axis = x.ndim - 3
    t_steps = x.shape[t_axis]
    # Input-side projections do not depend on the recurrence, so run each
    # gate's GEMM once over the whole sequence and slice per step.
    xz = T.matmul(x, params.w_z) + params.b_z
    xr = T.matmul(x, params.w_r) + params.b_r
    xn = T.matmul(x, params.w_n) + params.b_n
    h = T.Tensor(np.zeros(
        x.shape[:t_axis] + (1,) + x.shape[t_axis + 1:-1] + (d,),
        dtype=x.data.dtype))
    outs = []
    for t in range(t_steps):
        z = T.sigmoid(T.slice_axis(xz, t_axis, t, t + 1) + T.matmul(h, params.u_z))
        r = T.sigmoid(T.slice_axis(xr, t_axis, t, t + 1) + T.matmul(h, params.u_r))
        n = T.tanh(T.slice_axis(xn, t_axis, t, t + 1) + T.matmul(r * h, params.u_n))
        h = (1.0 - z) * n + z * h
        outs.append(h)
    return T.concat(outs, axis=t_axis)


def combine_streams(y_t: T.Tensor, y_s: T.Tensor,
                    beta: Optional[T.Tensor] = None) -> T.Tensor:
    """Merge the two encoded streams: plain sum, or a trainable convex blend."""
    if y_t.shape != y_s.shape:
        raise DimensionError(
            f"stream shapes disagree: {y_t.shape} vs {y_s.shape}")
    if beta is None:
        return y_t + y_s
    if beta.size != 1:
        raise ContractError(f"beta must be scalar, got shape {beta.shape}")
    return beta * y_t + (1.0 - beta) * y_s


# -- multi-head attention ----------------------------------------------------------

@dataclass
class MhsaParams:
    """Fused head projections: w_q/w_k/w_v are (W, heads*d_head); columns
    [j*d_head:(j+1)*d_head] belong to head j. w_o maps the concat back to W."""

    heads: int
    w_q: T.Tensor
    w_k: T.Tensor
    w_v: T.Tensor
    w_o: T.Tensor


def _split_heads(x: T.Tensor, heads: int) -> T.Tensor:
    """(..., L, heads*d) -> (..., heads, L, d)."""
    *lead, length, width = x.shape
    d = width // heads
    x = T.reshape(x, (*lead, length, heads, d))
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return T.transpose(x, axes)


def _merge_heads(x: T.Tensor) -> T.Tensor:
    """(..., heads, L, d) -> (..., L, heads*d)."""
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    x = T.transpose(x, axes)
    *lead, length, heads, d = x.shape
    return T.reshape(x, (*lead, length, heads * d))


def mhsa(q: T.Tensor, k: T.Tensor, v: T.Tensor, params: MhsaParams) -> T.Tensor:
    """Scaled dot-product attention with ``heads`` parallel heads.

    q is (..., L_q, W); k and v are (..., L_k, W) with matching leading dims
    (broadcasting allowed). Scores are scaled by 1/sqrt(d_head) before the
    row softmax.
    """
    width = params.w_q.shape[0]
    if q.shape[-1] != width or k.shape[-1] != width or v.shape[-1] != width:
        raise DimensionError(
            f"attention width mismatch: inputs {q.shape[-1]}/{k.shape[-1]}/"
            f"{v.shape[-1]} vs params {width}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"keys and values disagree on length: {k.shape} vs {v.shape}")
    heads = params.heads
    d_head = params.w_q.shape[1] // heads
    qh = _split_heads(T.matmul(q, params.w_q), heads)   # (..., h, L_q, d)
    kh = _split_heads(T.matmul(k, params.w_k), heads)   # (..., h, L_k, d)
    vh = _split_heads(T.matmul(v, params.w_v), heads)
    nd = kh.ndim
    kt = T.transpose(kh, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = T.matmul(qh, kt) * (1.0 / float(d_head) ** 0.5)
    attn = T.softmax_rows(scores)                       # (..., h, L_q, L_k)
    mixed = T.matmul(attn, vh)                          # (..., h, L_q, d)
    return T.matmul(_merge_heads(mixed), params.w_o)


# -- bottleneck decoder block ---------------------------------------------------------

@dataclass
class BtBlockParams:
    """it: (T', 3D) learned horizon queries; two attention stages over width
    3D; out_proj: (3D, D) closes the block back to model width."""

    it: T.Tensor
    stage1: MhsaParams
    stage2: MhsaParams
    out_proj: T.Tensor


def bt_block(z_prev: T.Tensor, m_t: T.Tensor, m_s: T.Tensor,
             params: BtBlockParams) -> T.Tensor:
    """One decoder block: widen, attend in, attend out, project.

    z_prev is (L_in, N, D) or (B, L_in, N, D); m_t is (L_in, D), or (B, L_in, D)
    when each batch entry has its own calendar; m_s is (N, D). The widened
    sequence per node is [z_prev row, step features, node features], width 3D.
    Stage one attends the T' learned queries over that sequence; stage two
    attends back using the sequence as queries when L_in equals T', or the
    stage-one outputs when lengths differ. Output is (..., T', N, D).
    """
    if z_prev.ndim not in (3, 4):
        raise DimensionError(f"decoder input must be rank 3 or 4, got {z_prev.shape}")
    l_in, n, d = z_prev.shape[-3:]
    lead = z_prev.shape[:-3]
    if m_t.shape != (l_in, d) and m_t.shape != lead + (l_in, d):
        raise DimensionError(
            f"step features {m_t.shape} do not match sequence {lead + (l_in, d)}")
    if m_s.shape != (n, d):
        raise DimensionError(
            f"node features {m_s.shape} do not match layout ({n}, {d})")
    t_out = params.it.shape[0]

    step_feats = T.broadcast_to(T.reshape(m_t, m_t.shape[:-1] + (1, d)),
                                lead + (l_in, n, d))
    node_feats = T.broadcast_to(T.reshape(m_s, (1, n, d)), lead + (l_in, n, d))
    wide = T.concat([z_prev, step_feats, node_feats], axis=-1)  # (..., L_in, N, 3D)

    nd = wide.ndim
    per_node = T.transpose(wide, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    refined = mhsa(params.it, per_node, per_node, params.stage1)  # (..., N, T', 3D)
    queries = per_node if l_in == t_out else refined
    out = mhsa(queries, refined, refined, params.stage2)          # (..., N, T', 3D)
    out = T.matmul(out, params.out_proj)                          # (..., N, T', D)
    nd = out.ndim
    return T.transpose(out, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def output_projection(z: T.Tensor, w_out: T.Tensor, b_out: T.Tensor) -> T.Tensor:
    """Affine map from model width to output channels, per position."""
    return T.matmul(z, w_out) + b_out
