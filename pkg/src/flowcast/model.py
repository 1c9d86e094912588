"""End-to-end forecasting model: wiring, parameter registry, forward pass.

Pipeline per batch: slot-conditioned graph diffusion over the input window,
calendar and spectral embeddings fused into a gating mask, trend/seasonal
decomposition, one GRU per stream, stream merge, a stack of bottleneck
attention blocks against the horizon calendar, and an affine head whose
output is denormalized to raw flow units.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .decomposition import DecomposedStates, decompose
from .dynamic_graph import DynamicGraphParams, dynamic_graph_conv
from .embeddings import TemporalEmbeddingParams, fuse, temporal_embedding
from .encdec import (
    BtBlockParams,
    GruParams,
    MhsaParams,
    bt_block,
    combine_streams,
    gru_encode,
    output_projection,
)
from .errors import ContractError, DimensionError
from .graph import SpatialEmbeddingParams, spatial_embedding


@dataclass
class ModelConfig:
    """Shape and variant switches for one model instance."""

    n_nodes: int
    channels: int
    steps_per_day: int
    t_in: int = 12
    t_out: int = 12
    heads: int = 8
    head_dim: int = 16
    blocks: int = 2
    k_r: int = 32
    graph_embed_dim: int = 16
    hops: int = 2
    alpha_mode: str = "fixed"
    beta_mode: str = "fixed"
    decomposition: str = "st"

    @property
    def width(self) -> int:
        return self.heads * self.head_dim

    def validate(self) -> None:
        if min(self.n_nodes, self.channels, self.steps_per_day, self.t_in,
               self.t_out, self.heads, self.head_dim, self.blocks, self.k_r,
               self.graph_embed_dim) < 1 or self.hops < 0:
            raise ContractError("model dimensions must be positive")
        if self.alpha_mode not in ("fixed", "trainable"):
            raise ContractError(f"unknown alpha_mode {self.alpha_mode!r}")
        if self.beta_mode not in ("fixed", "trainable"):
            raise ContractError(f"unknown beta_mode {self.beta_mode!r}")
        if self.decomposition not in ("st", "identity"):
            raise ContractError(f"unknown decomposition {self.decomposition!r}")


class Model:
    """Owns every trainable tensor plus the frozen preprocessing constants."""

    def __init__(self, config: ModelConfig, spectral_basis: np.ndarray,
                 mean: np.ndarray, std: np.ndarray, seed: int = 0):
        config.validate()
        basis = np.asarray(spectral_basis, dtype=np.float64)
        if basis.shape != (config.n_nodes, config.k_r):
            raise DimensionError(
                f"spectral basis {basis.shape} does not match "
                f"(n_nodes, k_r) = ({config.n_nodes}, {config.k_r})")
        self.config = config
        self.basis = T.Tensor(basis)
        self.mean = T.Tensor(np.asarray(mean, dtype=np.float64))
        self.std = T.Tensor(np.asarray(std, dtype=np.float64))
        if self.mean.shape != (config.channels,) or self.std.shape != (config.channels,):
            raise DimensionError(
                f"normalization stats must be per-channel ({config.channels},), "
                f"got {self.mean.shape} and {self.std.shape}")

        rng = np.random.default_rng(seed)
        d = config.width
        d_g = config.graph_embed_dim
        c = config.channels

        def linear(fan_in: int, *shape: int) -> T.Tensor:
            bound = 1.0 / np.sqrt(fan_in)
            return T.Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)

        def embedding(*shape: int) -> T.Tensor:
            return T.Tensor(rng.uniform(-0.5, 0.5, shape) / np.sqrt(d_g),
                            requires_grad=True)

        self.dyn = DynamicGraphParams(
            e_t=embedding(config.steps_per_day, d_g),
            e_s=embedding(config.n_nodes, d_g),
            e_e=embedding(config.n_nodes, d_g),
            k=embedding(d_g, d_g, d_g),
            w_in=linear(c, c, d),
            w_hops=[linear(d, d, d) for _ in range(config.hops + 1)])
        self.temporal = TemporalEmbeddingParams(
            w_in=linear(config.steps_per_day + 7, config.steps_per_day + 7, d),
            w1=linear(d, d, d),
            w2=linear(d, d, d))
        self.spatial = SpatialEmbeddingParams(
            w1=linear(config.k_r, config.k_r, d),
            w2=linear(d, d, d))
        self.alpha: Optional[T.Tensor] = None
        if config.alpha_mode == "trainable":
            self.alpha = T.Tensor(np.array(0.5), requires_grad=True)
        self.gru_trend = self._gru(linear, d)
        self.gru_seasonal = self._gru(linear, d)
        self.beta: Optional[T.Tensor] = None
        if config.beta_mode == "trainable":
            self.beta = T.Tensor(np.array(0.5), requires_grad=True)
        w = 3 * d
        self.bt_blocks = [
            BtBlockParams(
                it=linear(w, config.t_out, w),
                stage1=self._mhsa(linear, w, config.heads),
                stage2=self._mhsa(linear, w, config.heads),
                out_proj=linear(w, w, d))
            for _ in range(config.blocks)]
        self.w_out = linear(d, d, c)
        self.b_out = linear(d, c)

    @staticmethod
    def _gru(linear, d: int) -> GruParams:
        return GruParams(
            w_z=linear(d, d, d), u_z=linear(d, d, d), b_z=linear(d, d),
            w_r=linear(d, d, d), u_r=linear(d, d, d), b_r=linear(d, d),
            w_n=linear(d, d, d), u_n=linear(d, d, d), b_n=linear(d, d))

    @staticmethod
    def _mhsa(linear, width: int, heads: int) -> MhsaParams:
        return MhsaParams(heads=heads,
                          w_q=linear(width, width, width),
                          w_k=linear(width, width, width),
                          w_v=linear(width, width, width),
                          w_o=linear(width, width, width))

    def named_parameters(self) -> dict[str, T.Tensor]:
        """Every trainable tensor under a stable dotted name, in a fixed order."""
        params: dict[str, T.Tensor] = {
            "dyn.e_t": self.dyn.e_t, "dyn.e_s": self.dyn.e_s,
            "dyn.e_e": self.dyn.e_e, "dyn.k": self.dyn.k,
            "dyn.w_in": self.dyn.w_in,
        }
        for i, w in enumerate(self.dyn.w_hops):
            params[f"dyn.w_hop{i}"] = w
        params["temporal.w_in"] = self.temporal.w_in
        params["temporal.w1"] = self.temporal.w1
        params["temporal.w2"] = self.temporal.w2
        params["spatial.w1"] = self.spatial.w1
        params["spatial.w2"] = self.spatial.w2
        if self.alpha is not None:
            params["fuse.alpha"] = self.alpha
        for prefix, gru in (("gru_trend", self.gru_trend),
                            ("gru_seasonal", self.gru_seasonal)):
            for name in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r",
                         "w_n", "u_n", "b_n"):
                params[f"{prefix}.{name}"] = getattr(gru, name)
        if self.beta is not None:
            params["combine.beta"] = self.beta
        for i, block in enumerate(self.bt_blocks):
            params[f"block{i}.it"] = block.it
            for stage_name, stage in (("stage1", block.stage1),
                                      ("stage2", block.stage2)):
                params[f"block{i}.{stage_name}.w_q"] = stage.w_q
                params[f"block{i}.{stage_name}.w_k"] = stage.w_k
                params[f"block{i}.{stage_name}.w_v"] = stage.w_v
                params[f"block{i}.{stage_name}.w_o"] = stage.w_o
            params[f"block{i}.out_proj"] = block.out_proj
        params["head.w_out"] = self.w_out
        params["head.b_out"] = self.b_out
        return params

    # -- forward --------------------------------------------------------------

    def embeddings_for(self, tod: np.ndarray, dow: np.ndarray) -> T.Tensor:
        """Per-step temporal embedding for (B, L) calendar indices: (B, L, D)."""
        b, length = tod.shape
        flat = temporal_embedding(tod.reshape(-1), dow.reshape(-1), self.temporal)
        return T.reshape(flat, (b, length, self.config.width))

    def forward(self, x, tod_in, dow_in, tod_out, dow_out) -> T.Tensor:
        """Raw-scale predictions (B, T', N, C) for a collated batch."""
        cfg = self.config
        x = x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=np.float64))
        if x.ndim != 4 or x.shape[1:] != (cfg.t_in, cfg.n_nodes, cfg.channels):
            raise DimensionError(
                f"batch shape {x.shape} does not match "
                f"(B, {cfg.t_in}, {cfg.n_nodes}, {cfg.channels})")
        tod_in = np.asarray(tod_in)
        dow_in = np.asarray(dow_in)
        tod_out = np.asarray(tod_out)
        dow_out = np.asarray(dow_out)

        hidden = dynamic_graph_conv(x, tod_in, self.dyn)          # (B, T, N, D)
        m_t_hist = self.embeddings_for(tod_in, dow_in)            # (B, T, D)
        m_t_pred = self.embeddings_for(tod_out, dow_out)          # (B, T', D)
        m_s = spatial_embedding(self.basis, self.spatial)         # (N, D)

        parts = self.split_streams(hidden, m_t_hist, m_s)
        y = combine_streams(gru_encode(parts.trend, self.gru_trend),
                            gru_encode(parts.seasonal, self.gru_seasonal),
                            beta=self.beta)                       # (B, T, N, D)

        z = y
        for i, block in enumerate(self.bt_blocks):
            z = bt_block(z, m_t_hist if i == 0 else m_t_pred, m_s, block)
        normalized = output_projection(z, self.w_out, self.b_out)  # (B, T', N, C)
        return normalized * self.std + self.mean

    def decompose_window(self, x, tod_in, dow_in) -> DecomposedStates:
        """Trend/seasonal split of the encoded input window, (B, T, N, D) each."""
        x = x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=np.float64))
        tod_in = np.asarray(tod_in)
        dow_in = np.asarray(dow_in)
        hidden = dynamic_graph_conv(x, tod_in, self.dyn)
        m_t_hist = self.embeddings_for(tod_in, dow_in)
        m_s = spatial_embedding(self.basis, self.spatial)
        return self.split_streams(hidden, m_t_hist, m_s)

    def split_streams(self, hidden: T.Tensor, m_t_hist: T.Tensor,
                      m_s: T.Tensor) -> DecomposedStates:
        """Gate hidden states by the fused mask, or pass through untouched."""
        if self.config.decomposition == "identity":
            zeros = T.Tensor(np.zeros(hidden.shape))
            return DecomposedStates(trend=hidden, seasonal=zeros)
        mask = fuse(m_t_hist, m_s, alpha=self.alpha)              # (B, T, N, D)
        return decompose(hidden, mask)


def collate(windows) -> tuple[np.ndarray, ...]:
    """Stack sample windows into batch arrays (x, y, tod/dow in/out)."""
    x = np.stack([w.x for w in windows])
    y = np.stack([w.y for w in windows])
    tod_in = np.stack([w.tod_in for w in windows])
    dow_in = np.stack([w.dow_in for w in windows])
    tod_out = np.stack([w.tod_out for w in windows])
    dow_out = np.stack([w.dow_out for w in windows])
    return x, y, tod_in, dow_in, tod_out, dow_out
