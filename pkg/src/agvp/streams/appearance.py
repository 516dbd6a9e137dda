"""Normalized appearance stream.

Per-frame UV body textures are brightness-normalized, histogram-matched,
gamma-corrected, and blended across frames with visibility weights. The
aggregated texture is sampled into a texel set (3-D coordinates + RGB)
and encoded by a point-set encoder built from dynamic graph convolutions
with parallel grouped branches at several grouping rates.
"""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class AppearanceError(ValueError):
    pass


class UVPipelineWarning(UserWarning):
    """Non-fatal pipeline condition (all-invisible frame, texel reuse)."""


def check_texture(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3 or t.shape[2] != 3:
        raise AppearanceError(f"texture must be UxVx3, got {t.shape}")
    if not np.all(np.isfinite(t)) or t.min() < 0 or t.max() > 1:
        raise AppearanceError("texture values must be finite and in [0, 1]")
    return t


def check_mask(v: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != shape:
        raise AppearanceError(f"mask shape {v.shape} != texture shape {shape}")
    if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
        raise AppearanceError("mask values must be finite and in [0, 1]")
    return v


class UVExtractor(Protocol):
    """Produces a (texture, visibility) pair for one frame reference."""

    uv_shape: tuple[int, int]

    def extract(self, frame_ref) -> tuple[np.ndarray, np.ndarray]:
        ...


# ---------------------------------------------------------------------------
# per-frame texture normalization chain
# ---------------------------------------------------------------------------

NORM_TARGET_MEAN = 0.5
NORM_TARGET_STD = 0.2


def normalize_uv(texture: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Affine-rescale each channel of the visible texels to mean 0.5, std 0.2.

    Texels with zero visibility are left untouched. A fully invisible mask
    returns the input unchanged and emits a UVPipelineWarning.
    """
    t = check_texture(texture)
    v = check_mask(mask, t.shape[:2])
    visible = v > 0
    if not visible.any():
        warnings.warn("normalize_uv: mask is fully invisible, texture passed "
                      "through", UVPipelineWarning)
        return t.copy()
    out = t.copy()
    vals = t[visible]                       # (n, 3)
    mean = vals.mean(axis=0)
    std = vals.std(axis=0)                  # population std
    # constant channels carry rounding noise in std; snap them to target
    flat = std <= 1e-9
    scaled = np.where(flat, NORM_TARGET_MEAN,
                      (vals - mean) / np.where(flat, 1.0, std)
                      * NORM_TARGET_STD + NORM_TARGET_MEAN)
    out[visible] = np.clip(scaled, 0.0, 1.0)
    return out


def _quantize(t: np.ndarray) -> np.ndarray:
    return np.clip(np.round(t * 255.0), 0, 255).astype(np.int64)


def _match_channel(src: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """256-level CDF matching; returns a level lookup table.

    Source levels map through the mid-rank CDF (count below + half the
    count at the level) into the smallest reference level whose CDF
    reaches that quantile, so self-matching is the identity and a uniform
    source lands on the reference median.
    """
    src_hist = np.bincount(src, minlength=256).astype(np.float64)
    ref_hist = np.bincount(ref, minlength=256).astype(np.float64)
    src_cdf = np.cumsum(src_hist) / src_hist.sum()
    mid_cdf = src_cdf - 0.5 * src_hist / src_hist.sum()
    ref_cdf = np.cumsum(ref_hist) / ref_hist.sum()
    return np.searchsorted(ref_cdf, mid_cdf, side="left").clip(0, 255)


def histogram_match(texture: np.ndarray, reference: np.ndarray,
                    mask: Optional[np.ndarray] = None,
                    reference_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-channel CDF matching of visible texels onto a reference texture."""
    t = check_texture(texture)
    r = check_texture(reference)
    v = np.ones(t.shape[:2]) if mask is None else check_mask(mask, t.shape[:2])
    rv = np.ones(r.shape[:2]) if reference_mask is None else \
        check_mask(reference_mask, r.shape[:2])
    visible = v > 0
    ref_visible = rv > 0
    if not visible.any() or not ref_visible.any():
        warnings.warn("histogram_match: nothing visible, texture passed "
                      "through", UVPipelineWarning)
        return t.copy()
    out = t.copy()
    tq = _quantize(t)
    rq = _quantize(r)
    for c in range(3):
        lut = _match_channel(tq[visible, c], rq[ref_visible, c])
        out[visible, c] = lut[tq[visible, c]] / 255.0
    return out


def gamma_correct(texture: np.ndarray, gamma: Optional[float] = None,
                  mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Elementwise power-law correction T**g.

    When gamma is None it is solved per frame so the mean visible luminance
    maps to 0.5 (clamped to a sane range when the mean is extreme).
    """
    t = check_texture(texture)
    if gamma is None:
        v = np.ones(t.shape[:2]) if mask is None else check_mask(mask, t.shape[:2])
        visible = v > 0
        if not visible.any():
            warnings.warn("gamma_correct: nothing visible, gamma = 1",
                          UVPipelineWarning)
            return t.copy()
        lum = t[visible].mean()
        if lum <= 1e-6 or lum >= 1.0 - 1e-6:
            gamma = 1.0
        else:
            gamma = float(np.clip(np.log(0.5) / np.log(lum), 0.1, 10.0))
    if gamma <= 0:
        raise AppearanceError(f"gamma must be > 0, got {gamma}")
    return np.power(t, gamma)


def visibility(normals: np.ndarray, view: np.ndarray) -> np.ndarray:
    """Per-texel clamped dot product of unit surface normals and view vector."""
    n = np.asarray(normals, dtype=np.float64)
    if n.ndim != 3 or n.shape[2] != 3:
        raise AppearanceError(f"normals must be UxVx3, got {n.shape}")
    v = np.asarray(view, dtype=np.float64).reshape(3)
    return np.clip(n @ v, 0.0, 1.0)


def aggregate(textures: Sequence[np.ndarray], masks: Sequence[np.ndarray],
              mode: str = "weighted") -> tuple[np.ndarray, np.ndarray]:
    """Blend normalized per-frame textures into one map plus a valid mask.

    "weighted" divides the visibility-weighted sum by the summed
    visibility; "softmax" uses softmax-over-frames of the mask values as
    blending weights. Texels never visible in any frame come back as 0
    with valid_mask 0.
    """
    if len(textures) < 1 or len(textures) != len(masks):
        raise AppearanceError("need n >= 1 texture/mask pairs of equal count")
    ts = [check_texture(t) for t in textures]
    shape = ts[0].shape
    if any(t.shape != shape for t in ts):
        raise AppearanceError("texture shapes differ")
    vs = [check_mask(m, shape[:2]) for m in masks]
    v_stack = np.stack(vs)                      # (n, U, V)
    t_stack = np.stack(ts)                      # (n, U, V, 3)
    total = v_stack.sum(axis=0)
    valid = (total > 0).astype(np.float64)
    if mode == "weighted":
        # normalize to per-frame weights first so a single visible frame
        # passes through exactly (x / x == 1)
        w = v_stack / np.maximum(total, 1e-300)
        agg = (w[..., None] * t_stack).sum(axis=0)
        agg = np.where(valid[..., None] > 0, agg, 0.0)
    elif mode == "softmax":
        w = np.exp(v_stack - v_stack.max(axis=0, keepdims=True))
        w = w / w.sum(axis=0, keepdims=True)
        agg = (w[..., None] * t_stack).sum(axis=0)
        agg = np.where(valid[..., None] > 0, agg, 0.0)
    else:
        raise AppearanceError(f"unknown blend mode {mode!r}")
    # weight sums can overshoot 1 by an ulp; keep texels in range
    return np.clip(agg, 0.0, 1.0), valid


def texel_sample(texture: np.ndarray, valid_mask: np.ndarray,
                 coords3d: np.ndarray, m: int,
                 return_origins: bool = False):
    """Pick m valid texels as (x, y, z, r, g, b) rows.

    Texels are taken by a deterministic uniform stride over the valid
    texels in UV raster order; if fewer than m are valid they are reused
    cyclically (with a warning).
    """
    t = check_texture(texture)
    valid = check_mask(valid_mask, t.shape[:2])
    coords = np.asarray(coords3d, dtype=np.float64)
    if coords.shape != t.shape:
        raise AppearanceError(f"coords3d shape {coords.shape} != texture {t.shape}")
    if m < 1:
        raise AppearanceError("m must be >= 1")
    rows, cols = np.nonzero(valid > 0)
    n = rows.size
    if n == 0:
        raise AppearanceError("no valid texels to sample")
    if n >= m:
        pick = np.array([j * n // m for j in range(m)])
    else:
        warnings.warn(f"texel_sample: only {n} valid texels for m={m}, "
                      "sampling with replacement", UVPipelineWarning)
        pick = np.arange(m) % n
    r, c = rows[pick], cols[pick]
    texels = np.concatenate([coords[r, c], t[r, c]], axis=1)
    if return_origins:
        return texels, np.stack([r, c], axis=1)
    return texels


# ---------------------------------------------------------------------------
# omni-scale texel-set encoder
# ---------------------------------------------------------------------------

def knn_indices(coords: torch.Tensor, k: int) -> torch.Tensor:
    """k nearest neighbors (self excluded) over 3-D coordinates; (n, k)."""
    n = coords.shape[0]
    if n < k + 1:
        raise AppearanceError(f"need at least k+1={k + 1} points, got {n}")
    d2 = torch.cdist(coords, coords)
    d2.fill_diagonal_(float("inf"))
    return d2.topk(k, largest=False).indices


class EdgeConv(nn.Module):
    """Graph convolution over a fixed neighbor index: shared perceptron on
    [x_j - x_i ; x_i] edge features, max-reduced over neighbors."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.mlp = nn.Linear(2 * in_dim, out_dim)

    def forward(self, x, nbr):
        n, k = nbr.shape
        xi = x.unsqueeze(1).expand(n, k, x.shape[1])
        xj = x[nbr]                                     # (n, k, in_dim)
        edge = torch.cat([xj - xi, xi], dim=-1)
        h = F.leaky_relu(self.mlp(edge), 0.2)
        return h.max(dim=1).values                      # (n, out_dim)


class GroupedBranches(nn.Module):
    """Three parallel grouped perceptron branches (rates 1, 2, 4), summed."""

    RATES = (1, 2, 4)

    def __init__(self, dim: int):
        super().__init__()
        if dim % 4 != 0:
            raise AppearanceError(f"branch dim must be divisible by 4, got {dim}")
        self.branches = nn.ModuleList(
            nn.Conv1d(dim, dim, kernel_size=1, groups=r) for r in self.RATES)

    def forward(self, x):
        # x: (n, dim) -> conv over a singleton batch
        h = x.t().unsqueeze(0)                          # (1, dim, n)
        out = sum(b(h) for b in self.branches)
        return F.leaky_relu(out.squeeze(0).t(), 0.2)


class OmniScaleModule(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.edge = EdgeConv(in_dim, out_dim)
        self.branches = GroupedBranches(out_dim)

    def forward(self, x, nbr):
        return self.branches(self.edge(x, nbr))


class LearnedPooling(nn.Module):
    """Soft assignment of n input rows onto a fixed number of pooled rows."""

    def __init__(self, dim: int, rows_out: int):
        super().__init__()
        self.score = nn.Linear(dim, rows_out)

    def forward(self, x, coords):
        w = torch.softmax(self.score(x), dim=0)         # (n, rows_out)
        return w.t() @ x, w.t() @ coords


class OmniScaleEncoder(nn.Module):
    """Texel set (m x 6) -> fixed-size appearance embedding.

    Three graph-conv modules on the full set, a learned pooling to
    `pooled_rows` rows, a final graph-conv module on the pooled set, then
    global max pooling and a fully connected head.
    """

    def __init__(self, in_dim: int = 6, channels: Sequence[int] = (64, 128, 256, 512),
                 pooled_rows: int = 96, out_dim: int = 512, k: int = 8):
        super().__init__()
        if len(channels) != 4:
            raise AppearanceError("channel plan must have 4 stages")
        self.k = k
        self.pooled_rows = pooled_rows
        c1, c2, c3, c4 = channels
        self.mod1 = OmniScaleModule(in_dim, c1)
        self.mod2 = OmniScaleModule(c1, c2)
        self.mod3 = OmniScaleModule(c2, c3)
        self.pool = LearnedPooling(c3, pooled_rows)
        self.mod4 = OmniScaleModule(c3, c4)
        self.head = nn.Linear(c4, out_dim)

    @staticmethod
    def canonical_order(texels: torch.Tensor) -> torch.Tensor:
        """Lexicographic row order; fixes the floating-point reduction order
        so the embedding is exactly invariant to input row permutation."""
        cols = texels.detach().cpu().numpy()
        order = np.lexsort(tuple(cols[:, c] for c in reversed(range(cols.shape[1]))))
        return torch.as_tensor(order.copy(), dtype=torch.long, device=texels.device)

    def forward(self, texels: torch.Tensor) -> torch.Tensor:
        if texels.ndim != 2 or texels.shape[1] != 6:
            raise AppearanceError(f"texel set must be m x 6, got {tuple(texels.shape)}")
        x = texels[self.canonical_order(texels)]
        coords = x[:, :3]
        nbr = knn_indices(coords, self.k)
        h = self.mod1(x, nbr)
        h = self.mod2(h, nbr)
        h = self.mod3(h, nbr)
        pooled, pooled_coords = self.pool(h, coords)
        nbr2 = knn_indices(pooled_coords, self.k)
        h = self.mod4(pooled, nbr2)                      # (pooled_rows, c4)
        return self.head(h.max(dim=0).values)


# ---------------------------------------------------------------------------
# stream orchestration
# ---------------------------------------------------------------------------

@dataclass
class AppearanceConfig:
    clip_len: int = 8
    num_texels: int = 1024
    blend_mode: str = "weighted"            # or "softmax"
    histogram_reference: str = "first"      # or "fixed"
    fixed_reference: Optional[np.ndarray] = None
    auto_gamma: bool = True
    knn_k: int = 8
    channels: tuple = (64, 128, 256, 512)
    pooled_rows: int = 96
    embed_dim: int = 512


class AppearanceStream:
    """End-to-end tracklet -> appearance embedding pipeline."""

    def __init__(self, extractor: UVExtractor, coords3d: np.ndarray,
                 cfg: AppearanceConfig = AppearanceConfig(),
                 encoder: Optional[OmniScaleEncoder] = None):
        self.extractor = extractor
        self.coords3d = np.asarray(coords3d, dtype=np.float64)
        self.cfg = cfg
        self.encoder = encoder if encoder is not None else OmniScaleEncoder(
            channels=cfg.channels, pooled_rows=cfg.pooled_rows,
            out_dim=cfg.embed_dim, k=cfg.knn_k)

    def normalize_frame(self, texture, mask, reference) -> np.ndarray:
        t = normalize_uv(texture, mask)
        if reference is not None:
            t = histogram_match(t, reference, mask)
        gamma = None if self.cfg.auto_gamma else 1.0
        return gamma_correct(t, gamma, mask)

    def tracklet_texture(self, tracklet) -> tuple[np.ndarray, np.ndarray]:
        """Extract, normalize and blend the clip frames of one tracklet."""
        from ..core import sample_clip_indices

        idx = sample_clip_indices(len(tracklet.frames), self.cfg.clip_len)
        frames = [tracklet.frames[i] for i in sorted(set(idx))]
        pairs = [self.extractor.extract(f) for f in frames]
        if self.cfg.histogram_reference == "fixed":
            if self.cfg.fixed_reference is None:
                raise AppearanceError("fixed histogram reference not provided")
            ref = self.cfg.fixed_reference
        else:
            ref = normalize_uv(pairs[0][0], pairs[0][1])
        normed = [self.normalize_frame(t, v, ref) for t, v in pairs]
        return aggregate(normed, [v for _, v in pairs], self.cfg.blend_mode)

    def texels(self, tracklet) -> np.ndarray:
        agg, valid = self.tracklet_texture(tracklet)
        return texel_sample(agg, valid, self.coords3d, self.cfg.num_texels)

    def embed(self, tracklet) -> np.ndarray:
        t = torch.as_tensor(self.texels(tracklet),
                            dtype=next(self.encoder.parameters()).dtype)
        with torch.no_grad():
            return self.encoder(t).numpy().astype(np.float64)


# ---------------------------------------------------------------------------
# on-disk UV cache (texture PNG + mask PGM), keyed by frame path
# ---------------------------------------------------------------------------

class UVDiskCache:
    """8-bit on-disk cache of extracted (texture, mask) pairs."""

    def __init__(self, directory: Union[str, Path]):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)

    def _stem(self, frame_ref) -> Path:
        key = hashlib.sha256(str(frame_ref).encode("utf-8")).hexdigest()[:24]
        return self.dir / key

    def store(self, frame_ref, texture: np.ndarray, mask: np.ndarray) -> None:
        from PIL import Image

        t = _quantize(check_texture(texture)).astype(np.uint8)
        v = _quantize(check_mask(mask, texture.shape[:2])).astype(np.uint8)
        stem = self._stem(frame_ref)
        Image.fromarray(t, mode="RGB").save(stem.with_suffix(".png"))
        Image.fromarray(v, mode="L").save(stem.with_suffix(".pgm"))

    def load(self, frame_ref) -> Optional[tuple[np.ndarray, np.ndarray]]:
        from PIL import Image

        stem = self._stem(frame_ref)
        png, pgm = stem.with_suffix(".png"), stem.with_suffix(".pgm")
        if not png.exists() or not pgm.exists():
            return None
        with Image.open(png) as im:
            t = np.asarray(im, dtype=np.float64) / 255.0
        with Image.open(pgm) as im:
            v = np.asarray(im, dtype=np.float64) / 255.0
        return t, v


class CachedExtractor:
    """Wraps a UVExtractor with a UVDiskCache (quantized to 8-bit)."""

    def __init__(self, inner: UVExtractor, cache: UVDiskCache):
        self.inner = inner
        self.cache = cache
        self.uv_shape = inner.uv_shape

    def extract(self, frame_ref):
        hit = self.cache.load(frame_ref)
        if hit is not None:
            return hit
        t, v = self.inner.extract(frame_ref)
        self.cache.store(frame_ref, t, v)
        # round-trip through the cache so hits and misses agree exactly
        return self.cache.load(frame_ref)
