"""Deterministic synthetic aerial-ground tracklet corpus.

Identities are procedural articulated figures: a UV-space body texture
drives the figure's part colors, limbs swing with a per-identity gait
phase/frequency, ground platforms render upright high-resolution views,
and aerial platforms render foreshortened views degraded per altitude
(downscale, blur, additive noise). A ground-truth oracle recovers each
frame's UV texture and visibility mask from the stored generator state.

Corpus layout::

    <root>/frames/<tracklet_id>/<%06d>.png   8-bit RGB
    <root>/manifest.jsonl                    one record per line
    <root>/textures/, <root>/genmeta.json    generator-private state
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .core import (
    AERIAL_ALTITUDES,
    AltitudeBucket,
    CoreError,
    Platform,
    Tracklet,
    resize_bilinear,
)
from .streams.appearance import visibility


class DatagenError(ValueError):
    pass


class ManifestError(DatagenError):
    """Malformed manifest record (message names the offending line)."""


class UnsupportedFrameError(DatagenError):
    """Frame was not produced by a synthetic corpus this oracle knows."""


# view elevation above the horizontal, per capture altitude
ELEVATION_DEG = {0: 0.0, 15: 35.0, 30: 50.0, 80: 65.0, 120: 75.0}

MANIFEST_KEYS = ("tracklet_id", "person_id", "camera_id", "platform",
                 "altitude_m", "session", "clothing_id", "frames")


@dataclass(frozen=True)
class AltitudeNoise:
    """Degradation applied to aerial renders at one altitude."""

    downscale: float
    blur_px: float
    noise_sigma: float

    def __post_init__(self):
        if not 0 < self.downscale <= 1:
            raise DatagenError(f"downscale must be in (0, 1], got {self.downscale}")
        if self.blur_px < 0 or self.noise_sigma < 0:
            raise DatagenError("blur and noise must be >= 0")


DEFAULT_ALTITUDE_NOISE = {
    15: AltitudeNoise(1.0, 0.0, 0.01),
    30: AltitudeNoise(0.7, 1.0, 0.02),
    80: AltitudeNoise(0.35, 2.0, 0.04),
    120: AltitudeNoise(0.2, 3.0, 0.06),
}


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    num_identities: int = 8
    tracklets_per_identity_per_platform: int = 2
    altitudes: tuple[int, ...] = (15, 30, 80, 120)
    ground_platforms: tuple[Platform, ...] = (Platform.CCTV,)
    frames_per_tracklet: int = 10
    base_image_side: int = 96
    uv_size: int = 64
    altitude_noise: dict = field(default_factory=lambda: dict(DEFAULT_ALTITUDE_NOISE))
    clothing_change_prob: float = 0.0
    with_attributes: bool = False

    def __post_init__(self):
        if self.num_identities < 1 or self.tracklets_per_identity_per_platform < 1:
            raise DatagenError("identity and tracklet counts must be >= 1")
        if self.frames_per_tracklet < 1:
            raise DatagenError("frames_per_tracklet must be >= 1")
        if self.base_image_side < 16 or self.uv_size < 8:
            raise DatagenError("image/uv sizes too small")
        if not 0.0 <= self.clothing_change_prob <= 1.0:
            raise DatagenError("clothing_change_prob must be in [0, 1]")
        allowed = {b.value for b in AERIAL_ALTITUDES}
        if not set(self.altitudes) <= allowed:
            raise DatagenError(f"altitudes must be within {sorted(allowed)}")
        if len(set(self.altitudes)) != len(self.altitudes):
            raise DatagenError("duplicate altitudes")
        for alt in self.altitudes:
            if alt not in self.altitude_noise:
                raise DatagenError(f"no altitude_noise entry for {alt} m")
        for p in self.ground_platforms:
            if not isinstance(p, Platform) or not p.is_ground:
                raise DatagenError(f"{p!r} is not a ground platform")
        if not self.ground_platforms and not self.altitudes:
            raise DatagenError("corpus needs at least one platform")
        # degradation must grow with altitude
        ordered = sorted(self.altitudes)
        factors = [self.altitude_noise[a].downscale for a in ordered]
        if any(b > a for a, b in zip(factors, factors[1:])):
            raise DatagenError("downscale factor must be nonincreasing in altitude")


@dataclass
class SyntheticIdentity:
    person_id: str
    texture: np.ndarray          # clothing "a"
    texture_alt: np.ndarray      # clothing "b" (garment regions swapped)
    gait_phase: float
    gait_freq: float
    height_scale: float

    def texture_for(self, clothing_id: str) -> np.ndarray:
        return self.texture if clothing_id == "a" else self.texture_alt


# ---------------------------------------------------------------------------
# parametric body surface (cylinder torso + hemispherical cap)
# ---------------------------------------------------------------------------

CAP_V = 0.85          # fraction of body height where the head cap starts
BODY_RADIUS = 0.16
BODY_HEIGHT = 1.7

_HEAD_BAND = (0.85, 1.01)
_TORSO_BAND = (0.45, 0.85)
_LEG_BAND = (-0.01, 0.45)


def _v_of_rows(uv_size: int) -> np.ndarray:
    # row 0 is the top of the body
    return 1.0 - np.arange(uv_size) / (uv_size - 1)


def surface_grid(uv_size: int) -> tuple[np.ndarray, np.ndarray]:
    """(coords, normals), each uv_size x uv_size x 3, for the body surface.

    u (columns) wraps the body azimuth, v (rows, top first) runs along the
    height. Normals are horizontal on the torso cylinder and tilt upward
    over the head cap.
    """
    v = _v_of_rows(uv_size)[:, None]
    theta = 2.0 * math.pi * (np.arange(uv_size) / uv_size)[None, :]
    alpha = np.clip((v - CAP_V) / (1.0 - CAP_V), 0.0, 1.0) * (math.pi / 2 * 0.95)
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    sin_a, cos_a = np.sin(alpha), np.cos(alpha)
    normals = np.stack([sin_t * cos_a, sin_a * np.ones_like(sin_t),
                        cos_t * cos_a], axis=2)
    r = BODY_RADIUS * cos_a
    coords = np.stack([r * sin_t, v * BODY_HEIGHT * np.ones_like(sin_t),
                       r * cos_t], axis=2)
    return coords, normals


def view_vector(elevation_deg: float, azimuth_deg: float) -> np.ndarray:
    """Unit vector from the body toward the camera."""
    e = math.radians(elevation_deg)
    a = math.radians(azimuth_deg)
    return np.array([math.cos(e) * math.sin(a), math.sin(e),
                     math.cos(e) * math.cos(a)])


def _band_mask(uv_size: int, band: tuple[float, float]) -> np.ndarray:
    v = _v_of_rows(uv_size)
    return ((v >= band[0]) & (v < band[1]))[:, None] & np.ones((1, uv_size), bool)


def _stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:6], "big")


# ---------------------------------------------------------------------------
# identity synthesis
# ---------------------------------------------------------------------------

_MIN_PALETTE_DIST = 0.45


def _draw_palette(rng: np.random.Generator) -> np.ndarray:
    # skin, garment top, garment bottom (rows) x RGB
    return np.stack([rng.uniform(0.35, 0.85, 3),
                     rng.uniform(0.08, 0.92, 3),
                     rng.uniform(0.08, 0.92, 3)])


def _compose_texture(uv_size: int, palette: np.ndarray,
                     detail: np.ndarray) -> np.ndarray:
    tex = np.zeros((uv_size, uv_size, 3))
    for band, color in zip((_HEAD_BAND, _TORSO_BAND, _LEG_BAND), palette):
        tex[_band_mask(uv_size, band)] = color
    return np.clip(tex + detail, 0.02, 0.98)


def make_identities(cfg: GenConfig) -> list[SyntheticIdentity]:
    """Synthesize identities with pairwise-distinct textures.

    Garment palettes are rejection-sampled so no two identities are close
    in color space, which also guarantees a strictly positive per-texel
    texture distance between any two identities.
    """
    identities = []
    palettes: list[np.ndarray] = []
    for idx in range(cfg.num_identities):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, idx]))
        for _ in range(1000):
            palette = _draw_palette(rng)
            garments = palette[1:].reshape(-1)
            if all(np.linalg.norm(garments - p) >= _MIN_PALETTE_DIST
                   for p in palettes):
                break
        else:
            raise DatagenError("could not place identity palettes apart; "
                               "reduce num_identities")
        palettes.append(garments)
        alt_palette = palette.copy()
        alt_palette[1:] = _draw_palette(rng)[1:]
        detail = rng.uniform(-0.06, 0.06, (cfg.uv_size, cfg.uv_size, 3))
        identities.append(SyntheticIdentity(
            person_id=f"p{idx:03d}",
            texture=_compose_texture(cfg.uv_size, palette, detail),
            texture_alt=_compose_texture(cfg.uv_size, alt_palette, detail),
            gait_phase=float(rng.uniform(0, 1)),
            gait_freq=float(rng.uniform(0.08, 0.16)),
            height_scale=float(rng.uniform(0.85, 1.0)),
        ))
    # per-texel L2 distance strictly positive between any two identities
    for i in range(len(identities)):
        for j in range(i + 1, len(identities)):
            diff = np.linalg.norm(identities[i].texture - identities[j].texture,
                                  axis=2)
            if diff.min() <= 0:
                raise DatagenError("identity textures collide")  # pragma: no cover
    return identities


# ---------------------------------------------------------------------------
# figure rendering
# ---------------------------------------------------------------------------

def _draw_capsule(img, grid_y, grid_x, p0, p1, half_w, color):
    d = (p1[0] - p0[0], p1[1] - p0[1])
    len2 = d[0] * d[0] + d[1] * d[1]
    ry, rx = grid_y - p0[0], grid_x - p0[1]
    t = np.clip((ry * d[0] + rx * d[1]) / max(len2, 1e-9), 0.0, 1.0)
    dist2 = (ry - t * d[0]) ** 2 + (rx - t * d[1]) ** 2
    img[dist2 <= half_w * half_w] = color


def _region_color(texture: np.ndarray, band: tuple[float, float]) -> np.ndarray:
    return texture[_band_mask(texture.shape[0], band)].mean(axis=0)


def render_figure(identity: SyntheticIdentity, clothing_id: str, phase: float,
                  canvas_h: int, canvas_w: int) -> np.ndarray:
    """Upright articulated figure on a black canvas, full canvas height."""
    tex = identity.texture_for(clothing_id)
    head_c = _region_color(tex, _HEAD_BAND)
    top_c = _region_color(tex, _TORSO_BAND)
    bottom_c = _region_color(tex, _LEG_BAND)

    img = np.zeros((canvas_h, canvas_w, 3))
    gy, gx = np.mgrid[0:canvas_h, 0:canvas_w].astype(np.float64)
    s = canvas_h  # one unit of figure space in pixels
    cx = canvas_w / 2.0

    def pt(y, x):
        return (y * s, cx + x * s)

    swing = math.sin(2 * math.pi * phase)
    # legs first so the torso overdraws the hip joint
    hip = pt(0.54, 0.0)
    for side in (-1.0, 1.0):
        ang = 0.35 * swing * side
        foot = pt(0.54 + 0.40 * math.cos(ang), 0.40 * math.sin(ang))
        _draw_capsule(img, gy, gx, hip, foot, 0.055 * s, bottom_c * (0.92 if side > 0 else 1.0))
    for side in (-1.0, 1.0):
        ang = 0.55 * swing * side + side * 0.18
        shoulder = pt(0.24, 0.0)
        hand = pt(0.24 + 0.28 * math.cos(ang), 0.28 * math.sin(ang))
        _draw_capsule(img, gy, gx, shoulder, hand, 0.045 * s, top_c * (0.88 if side > 0 else 0.97))
    _draw_capsule(img, gy, gx, pt(0.22, 0.0), pt(0.54, 0.0), 0.115 * s, top_c)
    head = pt(0.115, 0.0)
    _draw_capsule(img, gy, gx, head, head, 0.082 * s, head_c)
    return img


def _render_frame(identity, clothing_id, phase, cfg: GenConfig,
                  elevation_deg: float, noise: AltitudeNoise,
                  rng: np.random.Generator) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """One degraded frame plus the subject bounding box (pre-noise)."""
    h = cfg.base_image_side
    w = cfg.base_image_side // 2
    fig = render_figure(identity, clothing_id, phase, h, w)
    squash = max(math.cos(math.radians(elevation_deg)), 0.22)
    scale = noise.downscale * identity.height_scale
    sub_h = max(6, round(h * squash * scale))
    sub_w = max(3, round(w * scale))
    small = resize_bilinear(fig, sub_h, sub_w)
    canvas = np.zeros((h, w, 3))
    jitter = int(rng.integers(-2, 3))
    top = (h - sub_h) // 2
    left = min(max((w - sub_w) // 2 + jitter, 0), w - sub_w)
    canvas[top:top + sub_h, left:left + sub_w] = small
    if noise.blur_px > 0:
        canvas = ndimage.gaussian_filter(canvas, sigma=(noise.blur_px, noise.blur_px, 0))
    mask = canvas.max(axis=2) > 0.02
    ys, xs = np.nonzero(mask)
    bbox = (int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1)
    if noise.noise_sigma > 0:
        canvas = canvas + rng.normal(0.0, noise.noise_sigma, canvas.shape)
    return np.clip(canvas, 0.0, 1.0), bbox


def _save_png(pixels: np.ndarray, path: Path) -> None:
    from PIL import Image

    arr = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    tracklet_id: str
    person_id: str
    camera_id: str
    platform: str
    altitude_m: int
    session: str
    clothing_id: str
    frames: tuple[str, ...]

    def to_json(self) -> str:
        payload = {k: getattr(self, k) for k in MANIFEST_KEYS}
        payload["frames"] = list(self.frames)
        return json.dumps(payload, separators=(",", ":"))


@dataclass
class Manifest:
    records: list[ManifestRecord]
    attributes: Optional[dict] = None
    root: Optional[Path] = field(default=None, compare=False)

    def __len__(self):
        return len(self.records)

    def to_tracklets(self) -> list[Tracklet]:
        if self.root is None:
            raise DatagenError("manifest has no root directory")
        out = []
        for r in self.records:
            out.append(Tracklet(
                tracklet_id=r.tracklet_id, person_id=r.person_id,
                camera_id=r.camera_id, platform=Platform(r.platform),
                altitude=AltitudeBucket.from_meters(r.altitude_m),
                session=r.session, clothing_id=r.clothing_id,
                frames=tuple(str(self.root / f) for f in r.frames)))
        return out


def write_manifest(manifest: Manifest, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in manifest.records:
            fh.write(r.to_json() + "\n")
    attr_path = path.parent / "attributes.json"
    if manifest.attributes is not None:
        attr_path.write_text(
            json.dumps(manifest.attributes, sort_keys=True, indent=1) + "\n",
            encoding="utf-8")


def load_manifest(path: Union[str, Path], check_frames: bool = True) -> Manifest:
    path = Path(path)
    root = path.parent
    records = []
    seen_tracklets: set[str] = set()
    seen_frames: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ManifestError(f"line {lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"line {lineno}: record must be an object")
            missing = [k for k in MANIFEST_KEYS if k not in obj]
            if missing:
                raise ManifestError(f"line {lineno}: missing key(s) {missing}")
            unknown = [k for k in obj if k not in MANIFEST_KEYS]
            if unknown:
                raise ManifestError(f"line {lineno}: unknown key(s) {unknown}")
            try:
                rec = ManifestRecord(
                    tracklet_id=str(obj["tracklet_id"]),
                    person_id=str(obj["person_id"]),
                    camera_id=str(obj["camera_id"]),
                    platform=str(obj["platform"]),
                    altitude_m=int(obj["altitude_m"]),
                    session=str(obj["session"]),
                    clothing_id=str(obj["clothing_id"]),
                    frames=tuple(str(f) for f in obj["frames"]))
                Platform(rec.platform)
                AltitudeBucket.from_meters(rec.altitude_m)
            except (ValueError, TypeError, CoreError) as e:
                raise ManifestError(f"line {lineno}: {e}") from None
            if not rec.frames:
                raise ManifestError(f"line {lineno}: record has no frames")
            for k in ("tracklet_id", "person_id", "camera_id", "session",
                      "clothing_id"):
                if not getattr(rec, k):
                    raise ManifestError(f"line {lineno}: empty {k}")
            if rec.tracklet_id in seen_tracklets:
                raise ManifestError(f"line {lineno}: duplicate tracklet_id "
                                    f"{rec.tracklet_id}")
            seen_tracklets.add(rec.tracklet_id)
            for f in rec.frames:
                if f in seen_frames:
                    raise ManifestError(f"line {lineno}: duplicate frame path {f}")
                seen_frames.add(f)
                if check_frames and not (root / f).exists():
                    raise ManifestError(f"line {lineno}: frame path {f} does "
                                        "not exist")
            records.append(rec)
    attributes = None
    attr_path = root / "attributes.json"
    if attr_path.exists():
        attributes = json.loads(attr_path.read_text(encoding="utf-8"))
    return Manifest(records=records, attributes=attributes, root=root)


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------

def _platform_buckets(cfg: GenConfig):
    buckets = [(p, 0) for p in cfg.ground_platforms]
    buckets += [(Platform.AERIAL, alt) for alt in sorted(cfg.altitudes)]
    return buckets


def _camera_name(platform: Platform, altitude: int) -> str:
    if platform is Platform.AERIAL:
        return f"uav{altitude:03d}"
    return {"cctv": "cctv00", "wearable": "wear00"}[platform.value]


_GROUND_NOISE = AltitudeNoise(1.0, 0.0, 0.0)


def generate_corpus(cfg: GenConfig, out_dir: Union[str, Path]) -> Manifest:
    """Render the corpus under out_dir and return its manifest.

    Output is a pure function of cfg: every RNG stream is derived from
    (seed, tracklet identity), so regeneration is byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    identities = make_identities(cfg)

    # clothing is decided per (identity, session): everyone keeps outfit "a"
    # in session 0 and may switch for later sessions
    def clothing_for(idx: int, session: int) -> str:
        if session == 0 or cfg.clothing_change_prob == 0.0:
            return "a"
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 3, idx, session]))
        return "b" if rng.uniform() < cfg.clothing_change_prob else "a"

    tex_dir = out / "textures"
    tex_dir.mkdir(exist_ok=True)
    texture_files = {}
    for idx, ident in enumerate(identities):
        for clothing in ("a", "b"):
            rel = f"textures/{ident.person_id}_{clothing}.png"
            _save_png(ident.texture_for(clothing), out / rel)
            texture_files[(ident.person_id, clothing)] = rel

    records = []
    genmeta = {"uv_size": cfg.uv_size, "seed": cfg.seed, "tracklets": {}}
    for idx, ident in enumerate(identities):
        for platform, altitude in _platform_buckets(cfg):
            cam = _camera_name(platform, altitude)
            noise = (cfg.altitude_noise[altitude] if platform is Platform.AERIAL
                     else _GROUND_NOISE)
            elevation = ELEVATION_DEG[altitude]
            for session in range(cfg.tracklets_per_identity_per_platform):
                clothing = clothing_for(idx, session)
                tid = f"{ident.person_id}-{cam}-s{session}"
                rng = np.random.default_rng(
                    np.random.SeedSequence([cfg.seed, 2, _stable_hash(tid)]))
                azimuth0 = float(rng.uniform(0, 360))
                azimuth_step = float(rng.uniform(12, 40))
                frames = []
                areas = []
                heights = []
                for t in range(cfg.frames_per_tracklet):
                    phase = ident.gait_phase + ident.gait_freq * t
                    pixels, bbox = _render_frame(ident, clothing, phase, cfg,
                                                 elevation, noise, rng)
                    rel = f"frames/{tid}/{t:06d}.png"
                    _save_png(pixels, out / rel)
                    frames.append(rel)
                    areas.append((bbox[2] - bbox[0]) * (bbox[3] - bbox[1]))
                    heights.append(bbox[2] - bbox[0])
                records.append(ManifestRecord(
                    tracklet_id=tid, person_id=ident.person_id, camera_id=cam,
                    platform=platform.value, altitude_m=altitude,
                    session=f"s{session}", clothing_id=clothing,
                    frames=tuple(frames)))
                genmeta["tracklets"][tid] = {
                    "person_id": ident.person_id,
                    "clothing_id": clothing,
                    "texture_file": texture_files[(ident.person_id, clothing)],
                    "elevation_deg": elevation,
                    "azimuth0_deg": azimuth0,
                    "azimuth_step_deg": azimuth_step,
                    "noise_sigma": noise.noise_sigma,
                    "noise_key": _stable_hash(tid + "/uv"),
                    "mean_bbox_area": float(np.mean(areas)),
                    "mean_pixel_height": float(np.mean(heights)),
                }

    attributes = None
    if cfg.with_attributes:
        attributes = {ident.person_id: {
            "height_scale": round(ident.height_scale, 4),
            "gait_frequency": round(ident.gait_freq, 4),
        } for ident in identities}
    manifest = Manifest(records=records, attributes=attributes, root=out)
    write_manifest(manifest, out / "manifest.jsonl")
    (out / "genmeta.json").write_text(
        json.dumps(genmeta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return manifest


# ---------------------------------------------------------------------------
# ground-truth UV oracle
# ---------------------------------------------------------------------------

class SyntheticUVOracle:
    """UV extractor that replays the generator's state for corpus frames.

    Returns the identity texture restricted to texels visible from the
    frame's synthetic view (visibility = clamped normal/view dot product)
    with the frame's altitude noise added to the visible texels.
    """

    def __init__(self, corpus_root: Union[str, Path]):
        root = Path(corpus_root)
        meta_path = root / "genmeta.json"
        if not meta_path.exists():
            raise UnsupportedFrameError(f"{root} is not a synthetic corpus "
                                        "(genmeta.json missing)")
        self.root = root
        self.meta = json.loads(meta_path.read_text(encoding="utf-8"))
        self.uv_size = int(self.meta["uv_size"])
        self.uv_shape = (self.uv_size, self.uv_size)
        self.coords3d, self.normals = surface_grid(self.uv_size)
        self._textures: dict[str, np.ndarray] = {}

    def _texture(self, rel: str) -> np.ndarray:
        if rel not in self._textures:
            from PIL import Image

            with Image.open(self.root / rel) as im:
                self._textures[rel] = np.asarray(im, dtype=np.float64) / 255.0
        return self._textures[rel]

    def _tracklet_meta(self, frame_ref) -> tuple[dict, int]:
        path = Path(frame_ref)
        tid = path.parent.name
        info = self.meta["tracklets"].get(tid)
        if info is None:
            raise UnsupportedFrameError(f"frame {frame_ref} is not part of "
                                        f"corpus {self.root}")
        try:
            frame_idx = int(path.stem)
        except ValueError:
            raise UnsupportedFrameError(f"frame name {path.name} is not a "
                                        "corpus frame") from None
        return info, frame_idx

    def extract(self, frame_ref) -> tuple[np.ndarray, np.ndarray]:
        info, frame_idx = self._tracklet_meta(frame_ref)
        azimuth = info["azimuth0_deg"] + info["azimuth_step_deg"] * frame_idx
        view = view_vector(info["elevation_deg"], azimuth)
        vis = visibility(self.normals, view)
        tex = self._texture(info["texture_file"]).copy()
        sigma = info["noise_sigma"]
        if sigma > 0:
            rng = np.random.default_rng(
                np.random.SeedSequence([int(info["noise_key"]), frame_idx]))
            tex = np.clip(tex + rng.normal(0.0, sigma, tex.shape), 0.0, 1.0)
        tex[vis <= 0] = 0.0
        return tex, vis
