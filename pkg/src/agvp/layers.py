"""Small shared neural blocks: multi-head attention and a two-layer MLP.

Attention is written out explicitly (no fused kernels) so tests can
inspect the row-stochastic weight matrices and zero individual
projections.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over (..., N, dim) sequences."""

    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.heads, self.head_dim).transpose(-3, -2)

    def forward(self, query, key, value, need_weights: bool = False):
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim),
                             dim=-1)                     # (..., heads, Nq, Nk)
        out = (attn @ v).transpose(-3, -2)
        *lead, n, _, _ = out.shape
        out = self.out_proj(out.reshape(*lead, n, self.dim))
        return (out, attn) if need_weights else (out, None)


class MLP(nn.Module):
    def __init__(self, dim: int, hidden_ratio: float = 2.0):
        super().__init__()
        hidden = max(1, int(dim * hidden_ratio))
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Pre-norm transformer encoder block."""

    def __init__(self, dim: int, heads: int = 4, mlp_ratio: float = 2.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio)

    def forward(self, x, need_weights: bool = False):
        a, w = self.attn(self.norm1(x), self.norm1(x), self.norm1(x),
                         need_weights=need_weights)
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return (x, w) if need_weights else (x, None)
