"""Multi-scale attention stream.

Token maps tapped from the last N encoder layers are temporally
modulated per token and consumed by a chain of M query-refining decoder
blocks: block i cross-attends the query against the flattened volume of
layer N - M + i. A linear head maps the final query to the stream
embedding. The encoder is frozen by default; a trainable tiny-encoder
mode exists for end-to-end tests.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from ..encoder import FrameEncoder, TinyPatchEncoder
from ..layers import MLP, MultiHeadAttention


class MSAError(ValueError):
    pass


@dataclass
class MultiScaleConfig:
    num_tapped: int = 4      # layers tapped from the top of the encoder
    num_blocks: int = 4      # decoder blocks
    dim: int = 64
    heads: int = 4
    embed_dim: int = 128
    temporal_kernel: int = 3
    encoder_side: int = 64
    encoder_patch: int = 16
    freeze_encoder: bool = True

    def __post_init__(self):
        if self.num_blocks > self.num_tapped:
            raise MSAError(f"need num_blocks <= num_tapped, got "
                           f"{self.num_blocks} > {self.num_tapped}")
        if self.temporal_kernel % 2 != 1:
            raise MSAError("temporal kernel must be odd")


def tap_layers(clip: torch.Tensor, encoder: FrameEncoder,
               num_tapped: int) -> list[torch.Tensor]:
    """Token maps of the last num_tapped encoder layers, each (T, P, d)."""
    if encoder.num_layers < num_tapped:
        raise MSAError(f"encoder exposes {encoder.num_layers} layers, "
                       f"{num_tapped} requested")
    return encoder.layer_tokens(clip)[-num_tapped:]


class TemporalTokenConv(nn.Module):
    """Depthwise temporal convolution per token with a residual connection."""

    def __init__(self, dim: int, kernel: int = 3, residual: bool = True):
        super().__init__()
        self.residual = residual
        self.conv = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)

    def forward(self, volume: torch.Tensor) -> torch.Tensor:
        t, p, d = volume.shape
        x = volume.permute(1, 2, 0)                  # (P, d, T)
        y = self.conv(x).permute(2, 0, 1)            # back to (T, P, d)
        return volume + y if self.residual else y


class DecoderBlock(nn.Module):
    """One query-refinement step against a flattened feature volume."""

    def __init__(self, dim: int, heads: int = 4, mlp_ratio: float = 2.0):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.mlp = MLP(dim, mlp_ratio)

    def forward(self, query: torch.Tensor, volume: torch.Tensor,
                need_weights: bool = False):
        kv = volume.reshape(-1, volume.shape[-1])    # (T*P, d)
        a, w = self.attn(query.unsqueeze(0), kv, kv, need_weights=need_weights)
        q = query + a[0]
        q = q + self.mlp(q)
        return (q, w) if need_weights else q


class MultiScaleStream(nn.Module):
    def __init__(self, cfg: MultiScaleConfig = MultiScaleConfig(),
                 encoder: Optional[FrameEncoder] = None):
        super().__init__()
        self.cfg = cfg
        if encoder is None:
            encoder = TinyPatchEncoder(side=cfg.encoder_side,
                                       patch=cfg.encoder_patch, dim=cfg.dim,
                                       depth=cfg.num_tapped, heads=cfg.heads)
        if encoder.token_dim != cfg.dim:
            raise MSAError(f"encoder dim {encoder.token_dim} != stream dim "
                           f"{cfg.dim}")
        self.encoder = encoder
        if cfg.freeze_encoder and isinstance(encoder, nn.Module):
            for p in encoder.parameters():
                p.requires_grad_(False)
        self.temporal = nn.ModuleList(
            TemporalTokenConv(cfg.dim, cfg.temporal_kernel)
            for _ in range(cfg.num_blocks))
        self.blocks = nn.ModuleList(
            DecoderBlock(cfg.dim, cfg.heads) for _ in range(cfg.num_blocks))
        self.query0 = nn.Parameter(torch.randn(cfg.dim) * 0.02)
        self.head = nn.Linear(cfg.dim, cfg.embed_dim)

    @property
    def embed_dim(self) -> int:
        return self.cfg.embed_dim

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        n, m = self.cfg.num_tapped, self.cfg.num_blocks
        volumes = tap_layers(clip, self.encoder, n)
        q = self.query0
        for i in range(m):
            # block i+1 reads layer N - M + (i+1); volumes list is 1-based G_1..G_N
            volume = volumes[n - m + i]
            q = self.blocks[i](q, self.temporal[i](volume))
        return self.head(q)
