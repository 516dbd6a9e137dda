"""Pluggable frame encoders exposing per-layer token maps.

The default is a tiny trainable patch-attention encoder; anything that
satisfies FrameEncoder (e.g. an adapter around a pretrained image
encoder) can be dropped in instead.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import torch
import torch.nn as nn

from .core import FrameImage
from .layers import EncoderBlock


class EncoderError(ValueError):
    pass


@runtime_checkable
class FrameEncoder(Protocol):
    """Per-frame tokenizer with L tappable layers of P tokens of dim d."""

    token_dim: int
    num_layers: int
    num_tokens: int

    def layer_tokens(self, clip: torch.Tensor) -> list[torch.Tensor]:
        """All layer token maps for a (T, H, W, 3) clip; each (T, P, d)."""
        ...

    def frame_features(self, clip: torch.Tensor) -> torch.Tensor:
        """Pooled per-frame feature (T, d)."""
        ...


def clip_to_tensor(frames: Sequence[FrameImage], dtype=torch.float32) -> torch.Tensor:
    """Stack FrameImages into a (T, H, W, 3) tensor."""
    return torch.as_tensor(np.stack([f.pixels for f in frames]), dtype=dtype)


class TinyPatchEncoder(nn.Module):
    """Small vision transformer over square frames.

    Tokens are patch embeddings plus one leading class token, so
    num_tokens = (side / patch)**2 + 1. Frames are processed
    independently: attention never crosses the time axis.
    """

    def __init__(self, side: int = 64, patch: int = 16, dim: int = 64,
                 depth: int = 2, heads: int = 4, mlp_ratio: float = 2.0):
        super().__init__()
        if side % patch != 0:
            raise EncoderError(f"side {side} not divisible by patch {patch}")
        self.side = side
        self.patch = patch
        self.token_dim = dim
        self.num_layers = depth
        self.grid = side // patch
        self.num_tokens = self.grid ** 2 + 1
        self.patch_proj = nn.Linear(patch * patch * 3, dim)
        self.cls_token = nn.Parameter(torch.zeros(1, dim))
        self.pos_embed = nn.Parameter(torch.randn(self.num_tokens, dim) * 0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(dim, heads, mlp_ratio) for _ in range(depth))

    def _patchify(self, clip: torch.Tensor) -> torch.Tensor:
        t, h, w, c = clip.shape
        if (h, w, c) != (self.side, self.side, 3):
            raise EncoderError(f"expected (T, {self.side}, {self.side}, 3) "
                               f"clip, got {tuple(clip.shape)}")
        g, p = self.grid, self.patch
        x = clip.reshape(t, g, p, g, p, c).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(t, g * g, p * p * c)

    def layer_tokens(self, clip: torch.Tensor) -> list[torch.Tensor]:
        x = self.patch_proj(self._patchify(clip))            # (T, P-1, d)
        cls = self.cls_token.expand(x.shape[0], 1, self.token_dim)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        taps = []
        for block in self.blocks:
            x, _ = block(x)
            taps.append(x)
        return taps

    def frame_features(self, clip: torch.Tensor) -> torch.Tensor:
        return self.layer_tokens(clip)[-1][:, 0]             # final class token

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        return self.frame_features(clip)
