"""Temporal-spatial stream.

Per-frame encoder features run through a shape recurrence (GRU state +
body-shape regressor), a shape-gated temporal enhancer, and an identity
memory bank whose entry is refined against the current clip by
cross-attention. The stream output concatenates the pooled enhanced
features with the refined memory vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
import torch
import torch.nn as nn

from ..encoder import FrameEncoder, TinyPatchEncoder
from ..layers import MultiHeadAttention


class StreamError(ValueError):
    pass


SHAPE_DIM = 10  # body shape coefficient count


def temporal_average_pool(features: torch.Tensor) -> torch.Tensor:
    """Arithmetic mean over the time axis of (T, d) features."""
    return features.mean(dim=0)


class ShapeRecurrence(nn.Module):
    """GRU over frame features plus a two-layer shape regressor.

    g_t depends only on frames up to t; the regressor maps each state to
    a body-shape coefficient vector.
    """

    def __init__(self, feat_dim: int, state_dim: int, shape_dim: int = SHAPE_DIM):
        super().__init__()
        self.state_dim = state_dim
        self.gru = nn.GRUCell(feat_dim, state_dim)
        self.regressor = nn.Sequential(
            nn.Linear(state_dim, state_dim), nn.Tanh(),
            nn.Linear(state_dim, shape_dim))

    def forward(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = feats.new_zeros(1, self.state_dim)
        states = []
        for t in range(feats.shape[0]):
            h = self.gru(feats[t:t + 1], h)
            states.append(h[0])
        g = torch.stack(states)                     # (T, state_dim)
        return g, self.regressor(g)                 # shapes (T, shape)


class TemporalEnhancer(nn.Module):
    """Shape-gated feature mixing plus one temporal self-attention layer.

    The shape coefficients are projected to the feature dim, blended in
    through a sigmoid gate, and the result attends over the T positions
    with a residual connection.
    """

    def __init__(self, feat_dim: int, shape_dim: int = SHAPE_DIM, heads: int = 4):
        super().__init__()
        self.shape_proj = nn.Linear(shape_dim, feat_dim)
        self.gate = nn.Linear(feat_dim, feat_dim)
        self.attn = MultiHeadAttention(feat_dim, heads)

    def forward(self, feats: torch.Tensor, shapes: torch.Tensor,
                need_weights: bool = False):
        if feats.shape[0] != shapes.shape[0]:
            raise StreamError("feature/shape clip lengths differ")
        s = self.shape_proj(shapes)
        x = feats + torch.sigmoid(self.gate(s)) * s
        a, w = self.attn(x, x, x, need_weights=need_weights)
        out = x + a
        return (out, w) if need_weights else out


class MemoryRefiner(nn.Module):
    """Refine a memory vector against clip features by cross-attention."""

    def __init__(self, feat_dim: int, heads: int = 4):
        super().__init__()
        self.attn = MultiHeadAttention(feat_dim, heads)

    def forward(self, memory: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
        a, _ = self.attn(memory.unsqueeze(0), feats, feats)
        return memory + a[0]


class MemoryBank:
    """Per-identity mean of pooled clip features, recomputable exactly.

    Entries accumulate in insertion order so a rebuild from the same
    vectors reproduces the same floats.
    """

    def __init__(self):
        self._sums: dict[str, np.ndarray] = {}
        self._counts: dict[str, int] = {}

    def add(self, person_id: str, tap_vector: np.ndarray) -> None:
        v = np.asarray(tap_vector, dtype=np.float64)
        if person_id in self._sums:
            self._sums[person_id] = self._sums[person_id] + v
            self._counts[person_id] += 1
        else:
            self._sums[person_id] = v.copy()
            self._counts[person_id] = 1

    def __contains__(self, person_id: str) -> bool:
        return person_id in self._sums

    def __len__(self) -> int:
        return len(self._sums)

    def count(self, person_id: str) -> int:
        return self._counts[person_id]

    def entry(self, person_id: str) -> np.ndarray:
        if person_id not in self._sums:
            raise StreamError(f"no memory entry for identity {person_id}")
        return self._sums[person_id] / self._counts[person_id]

    @classmethod
    def from_taps(cls, taps: Iterable[tuple[str, np.ndarray]]) -> "MemoryBank":
        bank = cls()
        for pid, vec in taps:
            bank.add(pid, vec)
        return bank


@dataclass
class TemporalSpatialConfig:
    feat_dim: int = 64
    state_dim: int = 64
    shape_dim: int = SHAPE_DIM
    heads: int = 4
    encoder_side: int = 64
    encoder_patch: int = 16
    encoder_depth: int = 2


class TemporalSpatialStream(nn.Module):
    """Full stream: encoder -> shape recurrence -> enhancer -> memory refit.

    Output dim is 2 * feat_dim ([pooled enhanced ; refined memory]). In
    train mode the memory comes from the identity's bank entry; at
    inference, where the label is unknown, the clip's own pooled feature
    substitutes for it.
    """

    def __init__(self, cfg: TemporalSpatialConfig = TemporalSpatialConfig(),
                 encoder: Optional[FrameEncoder] = None):
        super().__init__()
        self.cfg = cfg
        if encoder is None:
            encoder = TinyPatchEncoder(side=cfg.encoder_side,
                                       patch=cfg.encoder_patch,
                                       dim=cfg.feat_dim,
                                       depth=cfg.encoder_depth,
                                       heads=cfg.heads)
        if encoder.token_dim != cfg.feat_dim:
            raise StreamError(f"encoder dim {encoder.token_dim} != stream "
                              f"feat_dim {cfg.feat_dim}")
        self.encoder = encoder
        self.shape_rec = ShapeRecurrence(cfg.feat_dim, cfg.state_dim, cfg.shape_dim)
        self.enhancer = TemporalEnhancer(cfg.feat_dim, cfg.shape_dim, cfg.heads)
        self.refiner = MemoryRefiner(cfg.feat_dim, cfg.heads)

    @property
    def embed_dim(self) -> int:
        return 2 * self.cfg.feat_dim

    def encode_frames(self, clip: torch.Tensor) -> torch.Tensor:
        return self.encoder.frame_features(clip)

    def enhanced_features(self, clip: torch.Tensor) -> torch.Tensor:
        feats = self.encode_frames(clip)
        _, shapes = self.shape_rec(feats)
        return self.enhancer(feats, shapes)

    def forward(self, clip: torch.Tensor, mode: str = "infer",
                memory: Optional[torch.Tensor] = None) -> torch.Tensor:
        if mode not in ("train", "infer"):
            raise StreamError(f"mode must be train or infer, got {mode!r}")
        enhanced = self.enhanced_features(clip)
        pooled = temporal_average_pool(enhanced)
        if mode == "train":
            if memory is None:
                raise StreamError("train mode requires the identity's memory "
                                  "entry (labeled input)")
            m = memory.to(enhanced.dtype)
        else:
            m = pooled
        refined = self.refiner(m, enhanced)
        return torch.cat([pooled, refined])

    @torch.no_grad()
    def build_memory(self, labeled_clips: Iterable[tuple[str, torch.Tensor]]
                     ) -> MemoryBank:
        """Bank of per-identity means of pooled enhanced clip features."""
        bank = MemoryBank()
        for pid, clip in labeled_clips:
            pooled = temporal_average_pool(self.enhanced_features(clip))
            bank.add(pid, pooled.cpu().numpy().astype(np.float64))
        return bank
