"""Shared domain types, clip sampling, and image geometry primitives.

Everything here is an immutable in-memory value; all other modules build
on these types.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np


class CoreError(ValueError):
    """Structural error in a core type or operation."""


class Platform(Enum):
    AERIAL = "aerial"
    CCTV = "cctv"
    WEARABLE = "wearable"

    @property
    def is_ground(self) -> bool:
        return self is not Platform.AERIAL


class AltitudeBucket(Enum):
    """Capture altitude in meters; GROUND for CCTV/wearable platforms."""

    GROUND = 0
    A15 = 15
    A30 = 30
    A80 = 80
    A120 = 120

    @classmethod
    def from_meters(cls, meters: int) -> "AltitudeBucket":
        try:
            return cls(meters)
        except ValueError:
            raise CoreError(f"no altitude bucket for {meters} m") from None


AERIAL_ALTITUDES = (AltitudeBucket.A15, AltitudeBucket.A30,
                    AltitudeBucket.A80, AltitudeBucket.A120)


def _require_id(value: str, name: str) -> str:
    if not isinstance(value, str) or not value:
        raise CoreError(f"{name} must be a non-empty string, got {value!r}")
    return value


@dataclass(frozen=True)
class FrameImage:
    """One RGB person crop, float values in [0, 1], at least 8x8 pixels."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise CoreError(f"frame must be HxWx3, got shape {px.shape}")
        if px.shape[0] < 8 or px.shape[1] < 8:
            raise CoreError(f"frame sides must be >= 8, got {px.shape[:2]}")
        if not np.all(np.isfinite(px)):
            raise CoreError("frame contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise CoreError("frame values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


FrameRef = Union[FrameImage, str, Path]


def load_frame(path: Union[str, Path]) -> FrameImage:
    """Read an 8-bit RGB image file into a FrameImage."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return FrameImage(arr)


def _resolve_frame(ref: FrameRef) -> FrameImage:
    if isinstance(ref, FrameImage):
        return ref
    return load_frame(ref)


@dataclass(frozen=True)
class Tracklet:
    """An identity-labeled, camera/altitude-tagged ordered frame sequence."""

    tracklet_id: str
    person_id: str
    camera_id: str
    platform: Platform
    altitude: AltitudeBucket
    session: str
    clothing_id: str
    frames: tuple = ()

    def __post_init__(self):
        for name in ("tracklet_id", "person_id", "camera_id", "session",
                     "clothing_id"):
            _require_id(getattr(self, name), name)
        if not isinstance(self.platform, Platform):
            raise CoreError(f"platform must be a Platform, got {self.platform!r}")
        if not isinstance(self.altitude, AltitudeBucket):
            raise CoreError(f"altitude must be an AltitudeBucket, got {self.altitude!r}")
        if self.platform.is_ground != (self.altitude is AltitudeBucket.GROUND):
            raise CoreError(
                f"platform {self.platform.value} is inconsistent with "
                f"altitude {self.altitude.value} m")
        frames = tuple(self.frames)
        if len(frames) < 1:
            raise CoreError(f"tracklet {self.tracklet_id} has no frames")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class Embedding:
    """Fixed-length real feature vector for one tracklet."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.size == 0:
            raise CoreError("embedding must be non-empty")
        if not np.all(np.isfinite(v)):
            raise CoreError("embedding contains non-finite values")
        if self.normalized and abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise CoreError("embedding flagged normalized but |v| != 1")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.size


def sample_clip_indices(num_frames: int, clip_len: int) -> list[int]:
    """Deterministic nondecreasing frame indices for a clip of clip_len.

    Long tracklets are strided uniformly with floor(i * L / T); short ones
    repeat the final frame.
    """
    if clip_len < 1:
        raise CoreError(f"clip length must be >= 1, got {clip_len}")
    if num_frames < 1:
        raise CoreError("cannot sample a clip from an empty tracklet")
    if num_frames >= clip_len:
        return [i * num_frames // clip_len for i in range(clip_len)]
    return list(range(num_frames)) + [num_frames - 1] * (clip_len - num_frames)


def sample_clip(tracklet: Tracklet, clip_len: int,
                loader: Callable[[FrameRef], FrameImage] = _resolve_frame
                ) -> list[FrameImage]:
    """Select clip_len frames from a tracklet, loading refs as needed."""
    indices = sample_clip_indices(len(tracklet), clip_len)
    # load each distinct frame once, duplicates share the object
    cache: dict[int, FrameImage] = {}
    clip = []
    for i in indices:
        if i not in cache:
            cache[i] = loader(tracklet.frames[i])
        clip.append(cache[i])
    return clip


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of an HxWxC array (half-pixel centers, edge clamp).

    Same-size calls return an exact copy so repeated resizing is stable.
    """
    h, w = pixels.shape[:2]
    if (h, w) == (out_h, out_w):
        return pixels.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = pixels[y0][:, x0] * (1 - wx) + pixels[y0][:, x1] * wx
    bot = pixels[y1][:, x0] * (1 - wx) + pixels[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def pad_and_resize(img: FrameImage, side: int) -> FrameImage:
    """Resize to side x side keeping aspect ratio, zero-padding the short axis.

    The long axis maps exactly to `side`; padding is centered.
    """
    if side < 8:
        raise CoreError(f"target side must be >= 8, got {side}")
    h, w = img.height, img.width
    if h >= w:
        new_h = side
        new_w = max(1, round(w * side / h))
    else:
        new_w = side
        new_h = max(1, round(h * side / w))
    content = resize_bilinear(img.pixels, new_h, new_w)
    # content stays in range, but float interpolation can drift by an ulp
    content = np.clip(content, 0.0, 1.0)
    out = np.zeros((side, side, 3), dtype=np.float64)
    top = (side - new_h) // 2
    left = (side - new_w) // 2
    out[top:top + new_h, left:left + new_w] = content
    return FrameImage(out)
