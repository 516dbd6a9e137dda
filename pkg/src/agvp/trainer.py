"""Desk-scale optimization loops for the three streams and the fusion head.

Streams train independently on identity classification (cross-entropy)
plus batch-hard triplet loss, with a P x K identity-balanced sampler,
horizontal-flip / random-erasing augmentation on image clips, and a
linear-warmup or cosine learning-rate schedule over adaptive-moment
updates with decoupled weight decay. Fusion trains last over frozen
stream embeddings. All loops are bitwise reproducible for a fixed seed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import Tracklet, load_frame, pad_and_resize, resize_bilinear, sample_clip_indices
from .datagen import Manifest, SyntheticUVOracle, surface_grid
from .encoder import TinyPatchEncoder
from .fusion import FeatureFusion
from .streams.appearance import AppearanceConfig, AppearanceStream, OmniScaleEncoder, UVExtractor
from .streams.multiscale import MultiScaleConfig, MultiScaleStream
from .streams.temporal_spatial import (
    MemoryBank,
    TemporalSpatialConfig,
    TemporalSpatialStream,
)

STREAM_NAMES = ("1", "2", "3")


class TrainerError(ValueError):
    pass


class SamplerError(TrainerError):
    pass


@dataclass
class TrainConfig:
    clip_len: int = 8
    frame_height: int = 64          # stream 1/2 image path (paper scale 256)
    frame_width: int = 32           # (paper scale 128)
    square_side: int = 64           # stream 3 pad-and-resize side (paper 224)
    batch_p: int = 4                # identities per batch
    batch_k: int = 4                # tracklets per identity
    lr: float = 5e-3
    weight_decay: float = 0.01
    epochs: int = 3
    steps_per_epoch: int = 20
    schedule: str = "warmup+decay"  # or "cosine"
    warmup_steps: int = 5
    decay_gamma: float = 0.5
    decay_every: int = 30
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    ce_weight: float = 1.0
    triplet_weight: float = 1.0
    triplet_margin: float = 0.3
    holdout_sessions: int = 1
    seed: int = 0

    def __post_init__(self):
        positive = ("clip_len", "frame_height", "frame_width", "square_side",
                    "batch_p", "batch_k", "epochs", "steps_per_epoch")
        for name in positive:
            if getattr(self, name) < 1:
                raise TrainerError(f"{name} must be >= 1")
        if self.lr < 0 or self.weight_decay < 0 or self.triplet_margin < 0:
            raise TrainerError("lr, weight decay and margin must be >= 0")
        if self.schedule not in ("warmup+decay", "cosine"):
            raise TrainerError(f"unknown schedule {self.schedule!r}")
        for p in (self.flip_prob, self.erase_prob):
            if not 0.0 <= p <= 1.0:
                raise TrainerError("augmentation probabilities must be in [0,1]")


@dataclass
class StreamHyper:
    """Desk-scale model dimensions for the three streams."""

    feat_dim: int = 64
    state_dim: int = 64
    heads: int = 4
    encoder_depth: int = 2
    msa_dim: int = 64
    msa_tapped: int = 4
    msa_blocks: int = 4
    msa_embed_dim: int = 128
    na_texels: int = 256
    na_channels: tuple = (64, 128, 256, 512)
    na_pooled_rows: int = 96
    na_embed_dim: int = 512
    na_knn: int = 8
    fused_dim: int = 128


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def batch_hard_triplet(embeddings: torch.Tensor, labels: torch.Tensor,
                       margin: float = 0.3) -> torch.Tensor:
    """Hardest-positive / hardest-negative hinge loss over a batch."""
    if embeddings.shape[0] != labels.shape[0]:
        raise TrainerError("embedding/label count mismatch")
    dist = torch.cdist(embeddings, embeddings)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool, device=embeddings.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    if not pos_mask.any(dim=1).all() or not neg_mask.any(dim=1).all():
        raise SamplerError("each anchor needs a positive and a negative; "
                           "use a P x K identity-balanced batch")
    d_ap = torch.where(pos_mask, dist, torch.full_like(dist, -math.inf)).max(dim=1).values
    d_an = torch.where(neg_mask, dist, torch.full_like(dist, math.inf)).min(dim=1).values
    return F.relu(d_ap - d_an + margin).mean()


@dataclass
class LossValues:
    ce: float
    triplet: float
    total: float


def loss_bundle(logits: torch.Tensor, embeddings: torch.Tensor,
                labels: torch.Tensor, cfg: TrainConfig
                ) -> tuple[torch.Tensor, LossValues]:
    ce = F.cross_entropy(logits, labels)
    tri = batch_hard_triplet(embeddings, labels, cfg.triplet_margin)
    total = cfg.ce_weight * ce + cfg.triplet_weight * tri
    return total, LossValues(float(ce.detach()), float(tri.detach()),
                             float(total.detach()))


def lr_multiplier(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if cfg.schedule == "cosine":
        if total_steps <= 1:
            return 1.0
        return 0.5 * (1.0 + math.cos(math.pi * step / (total_steps - 1)))
    if step < cfg.warmup_steps:
        return (step + 1) / cfg.warmup_steps
    return cfg.decay_gamma ** ((step - cfg.warmup_steps) // cfg.decay_every)


# ---------------------------------------------------------------------------
# identity-balanced sampling
# ---------------------------------------------------------------------------

def pk_batches(tracklets: Sequence[Tracklet], cfg: TrainConfig,
               rng: np.random.Generator) -> list[list[int]]:
    """steps_per_epoch batches of P identities x K tracklet indices."""
    by_person: dict[str, list[int]] = {}
    for i, t in enumerate(tracklets):
        by_person.setdefault(t.person_id, []).append(i)
    people = sorted(by_person)
    rich = [p for p in people if len(by_person[p]) >= 2]
    if len(rich) < 2:
        raise SamplerError("need >= 2 identities with >= 2 tracklets each")
    batches = []
    for _ in range(cfg.steps_per_epoch):
        chosen = rng.choice(len(rich), size=min(cfg.batch_p, len(rich)),
                            replace=False)
        batch = []
        for ci in sorted(chosen):
            pool = by_person[rich[ci]]
            take = rng.choice(len(pool), size=cfg.batch_k,
                              replace=len(pool) < cfg.batch_k)
            batch.extend(pool[j] for j in take)
        batches.append(batch)
    return batches


# ---------------------------------------------------------------------------
# clip preparation and augmentation
# ---------------------------------------------------------------------------

def load_clip_array(tracklet: Tracklet, clip_len: int, height: int, width: int,
                    square: bool = False) -> np.ndarray:
    """(T, H, W, 3) float32 clip; square mode pads-and-resizes instead."""
    idx = sample_clip_indices(len(tracklet), clip_len)
    frames = {}
    out = []
    for i in idx:
        if i not in frames:
            img = load_frame(tracklet.frames[i])
            if square:
                img = pad_and_resize(img, height)
                frames[i] = img.pixels
            else:
                frames[i] = np.clip(resize_bilinear(img.pixels, height, width),
                                    0.0, 1.0)
        out.append(frames[i])
    return np.stack(out).astype(np.float32)


def augment_clip(clip: np.ndarray, cfg: TrainConfig,
                 rng: np.random.Generator) -> np.ndarray:
    """Horizontal flip and random erasing, applied clip-consistently."""
    out = clip
    if rng.uniform() < cfg.flip_prob:
        out = out[:, :, ::-1].copy()
    if rng.uniform() < cfg.erase_prob:
        t, h, w, _ = out.shape
        area = rng.uniform(0.05, 0.2) * h * w
        aspect = rng.uniform(0.3, 3.3)
        eh = min(h, max(1, int(round(math.sqrt(area * aspect)))))
        ew = min(w, max(1, int(round(math.sqrt(area / aspect)))))
        top = int(rng.integers(0, h - eh + 1))
        left = int(rng.integers(0, w - ew + 1))
        fill = rng.uniform(size=(eh, ew, 3)).astype(np.float32)
        out = out.copy()
        out[:, top:top + eh, left:left + ew] = fill
    return out


class ClipCache:
    """Per-tracklet clip arrays loaded once (augmentation never cached)."""

    def __init__(self, cfg: TrainConfig, square: bool):
        self.cfg = cfg
        self.square = square
        self._store: dict[str, np.ndarray] = {}

    def get(self, tracklet: Tracklet) -> np.ndarray:
        if tracklet.tracklet_id not in self._store:
            if self.square:
                arr = load_clip_array(tracklet, self.cfg.clip_len,
                                      self.cfg.square_side,
                                      self.cfg.square_side, square=True)
            else:
                arr = load_clip_array(tracklet, self.cfg.clip_len,
                                      self.cfg.frame_height,
                                      self.cfg.frame_width)
            self._store[tracklet.tracklet_id] = arr
        return self._store[tracklet.tracklet_id]


# ---------------------------------------------------------------------------
# trainable stream wrappers
# ---------------------------------------------------------------------------

class _Classifier(nn.Module):
    def __init__(self, core: nn.Module, embed_dim: int, num_classes: int):
        super().__init__()
        self.core = core
        self.head = nn.Linear(embed_dim, num_classes)


class TrainableStream:
    """Uniform training/embedding facade over one stream."""

    name: str

    def __init__(self, model: _Classifier, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg

    def parameters(self):
        return [p for p in self.model.parameters() if p.requires_grad]

    def batch_embed(self, tracklets: Sequence[Tracklet], train: bool,
                    rng: Optional[np.random.Generator],
                    bank: Optional[MemoryBank]) -> torch.Tensor:
        raise NotImplementedError

    def embed_tracklet(self, tracklet: Tracklet) -> np.ndarray:
        raise NotImplementedError

    def rebuild_bank(self, tracklets: Sequence[Tracklet]) -> Optional[MemoryBank]:
        return None


class Stream1Trainable(TrainableStream):
    name = "1"

    def __init__(self, cfg: TrainConfig, hyper: StreamHyper, num_classes: int):
        stream = TemporalSpatialStream(TemporalSpatialConfig(
            feat_dim=hyper.feat_dim, state_dim=hyper.state_dim,
            heads=hyper.heads, encoder_side=0, encoder_patch=0,
            encoder_depth=hyper.encoder_depth),
            encoder=_rect_encoder(cfg, hyper))
        super().__init__(_Classifier(stream, stream.embed_dim, num_classes), cfg)
        self.cache = ClipCache(cfg, square=False)

    def _clip_tensor(self, arr: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(arr)

    def batch_embed(self, tracklets, train, rng, bank):
        rows = []
        for t in tracklets:
            arr = self.cache.get(t)
            if train:
                arr = augment_clip(arr, self.cfg, rng)
                memory = torch.as_tensor(bank.entry(t.person_id),
                                         dtype=torch.float32)
                rows.append(self.model.core(self._clip_tensor(arr),
                                            mode="train", memory=memory))
            else:
                rows.append(self.model.core(self._clip_tensor(arr), mode="infer"))
        return torch.stack(rows)

    @torch.no_grad()
    def embed_tracklet(self, tracklet):
        self.model.eval()
        arr = self.cache.get(tracklet)
        out = self.model.core(self._clip_tensor(arr), mode="infer")
        self.model.train()
        return out.numpy().astype(np.float64)

    def rebuild_bank(self, tracklets):
        self.model.eval()
        bank = self.model.core.build_memory(
            (t.person_id, self._clip_tensor(self.cache.get(t)))
            for t in tracklets)
        self.model.train()
        return bank


def _rect_encoder(cfg: TrainConfig, hyper: StreamHyper) -> nn.Module:
    """Patch encoder over H x W (non-square) frames for the image streams."""

    class RectPatchEncoder(TinyPatchEncoder):
        def __init__(self):
            # build square then rewire patch grid for the rectangle
            patch = math.gcd(cfg.frame_height, cfg.frame_width)
            patch = min(16, patch)
            super().__init__(side=patch, patch=patch, dim=hyper.feat_dim,
                             depth=hyper.encoder_depth, heads=hyper.heads)
            self.h, self.w = cfg.frame_height, cfg.frame_width
            if self.h % patch or self.w % patch:
                raise TrainerError("frame size must be divisible by patch")
            self.gh, self.gw = self.h // patch, self.w // patch
            self.num_tokens = self.gh * self.gw + 1
            self.pos_embed = nn.Parameter(
                torch.randn(self.num_tokens, self.token_dim) * 0.02)

        def _patchify(self, clip):
            t, h, w, c = clip.shape
            if (h, w, c) != (self.h, self.w, 3):
                raise TrainerError(f"expected (T, {self.h}, {self.w}, 3), "
                                   f"got {tuple(clip.shape)}")
            p = self.patch
            x = clip.reshape(t, self.gh, p, self.gw, p, c).permute(0, 1, 3, 2, 4, 5)
            return x.reshape(t, self.gh * self.gw, p * p * c)

    return RectPatchEncoder()


class Stream2Trainable(TrainableStream):
    name = "2"

    def __init__(self, cfg: TrainConfig, hyper: StreamHyper, num_classes: int,
                 extractor: UVExtractor):
        encoder = OmniScaleEncoder(channels=hyper.na_channels,
                                   pooled_rows=hyper.na_pooled_rows,
                                   out_dim=hyper.na_embed_dim, k=hyper.na_knn)
        super().__init__(_Classifier(encoder, hyper.na_embed_dim, num_classes),
                         cfg)
        uv = extractor.uv_shape[0]
        coords3d, _ = surface_grid(uv)
        self.pipeline = AppearanceStream(
            extractor, coords3d,
            AppearanceConfig(clip_len=cfg.clip_len, num_texels=hyper.na_texels,
                             knn_k=hyper.na_knn, channels=hyper.na_channels,
                             pooled_rows=hyper.na_pooled_rows,
                             embed_dim=hyper.na_embed_dim),
            encoder=encoder)
        self._texels: dict[str, torch.Tensor] = {}

    def _texel_tensor(self, tracklet: Tracklet) -> torch.Tensor:
        tid = tracklet.tracklet_id
        if tid not in self._texels:
            self._texels[tid] = torch.as_tensor(
                self.pipeline.texels(tracklet), dtype=torch.float32)
        return self._texels[tid]

    def batch_embed(self, tracklets, train, rng, bank):
        return torch.stack([self.model.core(self._texel_tensor(t))
                            for t in tracklets])

    @torch.no_grad()
    def embed_tracklet(self, tracklet):
        self.model.eval()
        out = self.model.core(self._texel_tensor(tracklet))
        self.model.train()
        return out.numpy().astype(np.float64)


class Stream3Trainable(TrainableStream):
    name = "3"

    def __init__(self, cfg: TrainConfig, hyper: StreamHyper, num_classes: int):
        stream = MultiScaleStream(MultiScaleConfig(
            num_tapped=hyper.msa_tapped, num_blocks=hyper.msa_blocks,
            dim=hyper.msa_dim, heads=hyper.heads,
            embed_dim=hyper.msa_embed_dim, encoder_side=cfg.square_side,
            encoder_patch=16, freeze_encoder=True))
        super().__init__(_Classifier(stream, stream.embed_dim, num_classes), cfg)
        self.cache = ClipCache(cfg, square=True)

    def batch_embed(self, tracklets, train, rng, bank):
        rows = []
        for t in tracklets:
            arr = self.cache.get(t)
            if train:
                arr = augment_clip(arr, self.cfg, rng)
            rows.append(self.model.core(torch.as_tensor(arr)))
        return torch.stack(rows)

    @torch.no_grad()
    def embed_tracklet(self, tracklet):
        self.model.eval()
        out = self.model.core(torch.as_tensor(self.cache.get(tracklet)))
        self.model.train()
        return out.numpy().astype(np.float64)


def build_trainable(stream: str, cfg: TrainConfig, hyper: StreamHyper,
                    num_classes: int,
                    extractor: Optional[UVExtractor] = None) -> TrainableStream:
    if stream == "1":
        return Stream1Trainable(cfg, hyper, num_classes)
    if stream == "2":
        if extractor is None:
            raise TrainerError("stream 2 needs a UV extractor")
        return Stream2Trainable(cfg, hyper, num_classes, extractor)
    if stream == "3":
        return Stream3Trainable(cfg, hyper, num_classes)
    raise TrainerError(f"unknown stream {stream!r}")


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def split_holdout(tracklets: Sequence[Tracklet], cfg: TrainConfig
                  ) -> tuple[list[Tracklet], list[Tracklet]]:
    """Hold out the last holdout_sessions sessions per (person, camera)."""
    if cfg.holdout_sessions < 1:
        return list(tracklets), []
    sessions_by_group: dict[tuple, list[str]] = {}
    for t in tracklets:
        sessions_by_group.setdefault((t.person_id, t.camera_id), []).append(t.session)
    held = set()
    for group, sessions in sessions_by_group.items():
        ordered = sorted(set(sessions))
        if len(ordered) > cfg.holdout_sessions:
            held.update((group, s) for s in ordered[-cfg.holdout_sessions:])
    train = [t for t in tracklets
             if ((t.person_id, t.camera_id), t.session) not in held]
    holdout = [t for t in tracklets
               if ((t.person_id, t.camera_id), t.session) in held]
    return train, holdout


def _holdout_rank1(trainable: TrainableStream,
                   holdout: Sequence[Tracklet]) -> Optional[float]:
    aerial = [t for t in holdout if not t.platform.is_ground]
    ground = [t for t in holdout if t.platform.is_ground]
    if not aerial or not ground:
        return None
    ground_people = {t.person_id for t in ground}
    queries = [t for t in aerial if t.person_id in ground_people]
    if not queries:
        return None
    q = np.stack([trainable.embed_tracklet(t) for t in queries])
    g = np.stack([trainable.embed_tracklet(t) for t in ground])
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    top = np.argmax(qn @ gn.T, axis=1)
    hits = sum(ground[j].person_id == t.person_id
               for j, t in zip(top, queries))
    return hits / len(queries)


def class_index(tracklets: Sequence[Tracklet]) -> dict[str, int]:
    return {p: i for i, p in enumerate(sorted({t.person_id for t in tracklets}))}


def train_stream(stream: str, manifest: Manifest, cfg: TrainConfig,
                 hyper: StreamHyper = StreamHyper(),
                 extractor: Optional[UVExtractor] = None
                 ) -> tuple[TrainableStream, list[dict]]:
    """Optimize one stream on the manifest's identities.

    Returns the trained stream facade and a per-epoch log (losses, lr,
    rank-1 on the held-out sessions). Reproducible bit-for-bit per seed.
    """
    if stream not in STREAM_NAMES:
        raise TrainerError(f"stream must be one of {STREAM_NAMES}")
    tracklets = manifest.to_tracklets()
    train_set, holdout = split_holdout(tracklets, cfg)
    classes = class_index(tracklets)
    if stream == "2" and extractor is None:
        if manifest.root is None:
            raise TrainerError("stream 2 needs a UV extractor or corpus root")
        extractor = SyntheticUVOracle(manifest.root)
    torch.manual_seed(cfg.seed)
    trainable = build_trainable(stream, cfg, hyper, len(classes), extractor)
    trainable.model.train()
    opt = torch.optim.AdamW(trainable.parameters(), lr=cfg.lr,
                            weight_decay=cfg.weight_decay)
    total_steps = cfg.epochs * cfg.steps_per_epoch
    log = []
    step = 0
    for epoch in range(cfg.epochs):
        bank = trainable.rebuild_bank(train_set)
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 17, epoch]))
        epoch_losses = []
        for batch in pk_batches(train_set, cfg, rng):
            items = [train_set[i] for i in batch]
            labels = torch.tensor([classes[t.person_id] for t in items])
            mult = lr_multiplier(step, total_steps, cfg)
            for group in opt.param_groups:
                group["lr"] = cfg.lr * mult
            emb = trainable.batch_embed(items, train=True, rng=rng, bank=bank)
            logits = trainable.model.head(emb)
            total, values = loss_bundle(logits, emb, labels, cfg)
            opt.zero_grad()
            total.backward()
            opt.step()
            epoch_losses.append(values)
            step += 1
        log.append({
            "epoch": epoch,
            "loss_ce": float(np.mean([v.ce for v in epoch_losses])),
            "loss_triplet": float(np.mean([v.triplet for v in epoch_losses])),
            "loss_total": float(np.mean([v.total for v in epoch_losses])),
            "lr": cfg.lr * lr_multiplier(step - 1, total_steps, cfg),
            "holdout_rank1": _holdout_rank1(trainable, holdout),
        })
    trainable.model.eval()
    return trainable, log


def embed_manifest(trainable: TrainableStream, manifest: Manifest
                   ) -> tuple[list[str], np.ndarray]:
    """Augmentation-free embeddings for every manifest tracklet."""
    tracklets = manifest.to_tracklets()
    ids = [t.tracklet_id for t in tracklets]
    mat = np.stack([trainable.embed_tracklet(t) for t in tracklets])
    return ids, mat


class FusionTrainable:
    def __init__(self, fusion: FeatureFusion, head: nn.Linear):
        self.fusion = fusion
        self.head = head

    def parameters(self):
        return list(self.fusion.parameters()) + list(self.head.parameters())


def train_fusion(manifest: Manifest,
                 stream_embeddings: Mapping[str, Mapping[str, np.ndarray]],
                 cfg: TrainConfig, fused_dim: int = 128
                 ) -> tuple[FusionTrainable, list[dict]]:
    """Fit the fusion projections and stream weights over frozen streams."""
    if set(stream_embeddings) != set(STREAM_NAMES):
        raise TrainerError("fusion needs embeddings for streams 1, 2 and 3")
    tracklets = manifest.to_tracklets()
    train_set, _ = split_holdout(tracklets, cfg)
    classes = class_index(tracklets)
    in_dims = tuple(
        len(next(iter(stream_embeddings[s].values()))) for s in STREAM_NAMES)
    torch.manual_seed(cfg.seed)
    fusion = FeatureFusion(in_dims, fused_dim)
    head = nn.Linear(fused_dim, len(classes))
    trainable = FusionTrainable(fusion, head)
    opt = torch.optim.AdamW(trainable.parameters(), lr=cfg.lr,
                            weight_decay=cfg.weight_decay)
    total_steps = cfg.epochs * cfg.steps_per_epoch
    stacked = {
        t.tracklet_id: tuple(
            torch.as_tensor(np.asarray(stream_embeddings[s][t.tracklet_id]),
                            dtype=torch.float32)
            for s in STREAM_NAMES)
        for t in train_set}
    log = []
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 23, epoch]))
        epoch_losses = []
        for batch in pk_batches(train_set, cfg, rng):
            items = [train_set[i] for i in batch]
            labels = torch.tensor([classes[t.person_id] for t in items])
            mult = lr_multiplier(step, total_steps, cfg)
            for group in opt.param_groups:
                group["lr"] = cfg.lr * mult
            rows = torch.stack([
                fusion(*stacked[t.tracklet_id]) for t in items])
            logits = head(rows)
            total, values = loss_bundle(logits, rows, labels, cfg)
            opt.zero_grad()
            total.backward()
            opt.step()
            epoch_losses.append(values)
            step += 1
        weights = fusion.weights().detach().numpy()
        log.append({
            "epoch": epoch,
            "loss_total": float(np.mean([v.total for v in epoch_losses])),
            "weights": [float(w) for w in weights],
        })
    return trainable, log


def fuse_manifest_embeddings(fusion: FeatureFusion,
                             stream_embeddings: Mapping[str, Mapping[str, np.ndarray]]
                             ) -> dict[str, np.ndarray]:
    ids = sorted(stream_embeddings["1"])
    out = {}
    with torch.no_grad():
        for tid in ids:
            parts = tuple(
                torch.as_tensor(np.asarray(stream_embeddings[s][tid]),
                                dtype=torch.float32)
                for s in STREAM_NAMES)
            out[tid] = fusion(*parts).numpy().astype(np.float64)
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = "AGVPCKPT"
CKPT_VERSION = 1


def save_checkpoint(params: Mapping[str, np.ndarray], path: Union[str, Path],
                    train_config: Optional[TrainConfig] = None,
                    extra: Optional[dict] = None) -> None:
    """Versioned container: array name/shape/dtype tags + raw bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = []
    blobs = []
    for name in sorted(params):
        arr = np.ascontiguousarray(np.asarray(params[name]))
        arrays.append({"name": name, "shape": list(arr.shape),
                       "dtype": arr.dtype.str})
        blobs.append(arr.tobytes())
    header = {
        "arrays": arrays,
        "train_config": asdict(train_config) if train_config else None,
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(f"{CKPT_MAGIC} {CKPT_VERSION}\n".encode("ascii"))
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: Union[str, Path]
                    ) -> tuple[dict[str, np.ndarray], Optional[dict], dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii", errors="replace").split()
        if len(magic) != 2 or magic[0] != CKPT_MAGIC:
            raise TrainerError(f"{path}: not a checkpoint file")
        if int(magic[1]) != CKPT_VERSION:
            raise TrainerError(f"{path}: unsupported checkpoint version "
                               f"{magic[1]} (expected {CKPT_VERSION})")
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    params = {}
    offset = 0
    for spec in header["arrays"]:
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = dtype.itemsize * count
        if offset + nbytes > len(payload):
            raise TrainerError(f"{path}: truncated at array {spec['name']}")
        params[spec["name"]] = np.frombuffer(
            payload[offset:offset + nbytes], dtype=dtype).reshape(spec["shape"]).copy()
        offset += nbytes
    if offset != len(payload):
        raise TrainerError(f"{path}: {len(payload) - offset} trailing bytes")
    return params, header.get("train_config"), header.get("extra", {})


def state_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_arrays(module: nn.Module, params: Mapping[str, np.ndarray]) -> None:
    state = module.state_dict()
    missing = sorted(set(state) - set(params))
    unexpected = sorted(set(params) - set(state))
    mismatched = [f"{k}: checkpoint {params[k].shape} vs model "
                  f"{tuple(state[k].shape)}"
                  for k in state if k in params
                  and tuple(params[k].shape) != tuple(state[k].shape)]
    if missing or unexpected or mismatched:
        raise TrainerError(
            "checkpoint does not fit the model; "
            f"missing={missing}, unexpected={unexpected}, "
            f"shape diffs={mismatched}")
    module.load_state_dict({k: torch.as_tensor(v) for k, v in params.items()})
