"""Stream combination.

Feature-level fusion projects the three stream embeddings to a common
dimension, L2-normalizes them, and mixes them with softmax-parameterized
learnable weights. Rank-level fusion combines the three per-stream
orderings with reciprocal rank fusion.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

RRF_K = 60


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class RankedList:
    """Deterministic gallery ordering for one query.

    Entries are (gallery_id, score) sorted by descending score with ties
    broken by ascending gallery id; every gallery id appears once.
    """

    query_id: str
    entries: tuple

    def __post_init__(self):
        entries = tuple((str(g), float(s)) for g, s in self.entries)
        ids = [g for g, _ in entries]
        if len(set(ids)) != len(ids):
            raise FusionError(f"duplicate gallery ids in ranking for "
                              f"{self.query_id}")
        keys = [(-s, g) for g, s in entries]
        if keys != sorted(keys):
            raise FusionError("entries violate the (score desc, id asc) order")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_scores(cls, query_id: str, scores: Mapping[str, float]) -> "RankedList":
        ordered = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls(query_id=query_id, entries=tuple(ordered))

    def gallery_ids(self) -> list[str]:
        return [g for g, _ in self.entries]

    def rank_of(self, gallery_id: str) -> int:
        """1-based rank of a gallery item."""
        for i, (g, _) in enumerate(self.entries, start=1):
            if g == gallery_id:
                return i
        raise FusionError(f"{gallery_id} not in ranking for {self.query_id}")


def rrf(rank_lists: Sequence[RankedList], k: int = RRF_K) -> RankedList:
    """Reciprocal rank fusion of one query's per-stream rankings.

    score(d) = sum_i 1 / (k + r_i(d)) over the input lists, with 1-based
    ranks.
    """
    if not rank_lists:
        raise FusionError("no rank lists to fuse")
    if k < 0:
        raise FusionError(f"rrf constant must be >= 0, got {k}")
    query_id = rank_lists[0].query_id
    gallery = set(rank_lists[0].gallery_ids())
    for rl in rank_lists[1:]:
        if rl.query_id != query_id:
            raise FusionError(f"mixed query ids: {rl.query_id} vs {query_id}")
        if set(rl.gallery_ids()) != gallery:
            raise FusionError("rank lists cover different gallery sets")
    ranks: dict[str, list[int]] = {g: [] for g in gallery}
    for rl in rank_lists:
        for rank, (g, _) in enumerate(rl.entries, start=1):
            ranks[g].append(rank)
    # summing in sorted rank order keeps scores bit-identical under any
    # permutation of the input lists
    scores = {g: sum(1.0 / (k + r) for r in sorted(rs))
              for g, rs in ranks.items()}
    return RankedList.from_scores(query_id, scores)


class FeatureFusion(nn.Module):
    """Project, normalize and convexly mix the three stream embeddings."""

    def __init__(self, in_dims: Sequence[int], fused_dim: int = 128):
        super().__init__()
        if len(in_dims) != 3:
            raise FusionError("feature fusion is fixed at three streams")
        self.fused_dim = fused_dim
        self.projections = nn.ModuleList(
            nn.Linear(d, fused_dim) for d in in_dims)
        self.logits = nn.Parameter(torch.zeros(3))

    def weights(self) -> torch.Tensor:
        """(alpha, beta, gamma) on the probability simplex."""
        return torch.softmax(self.logits, dim=0)

    @staticmethod
    def _unit(x: torch.Tensor) -> torch.Tensor:
        return x / x.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    def forward(self, temporal: torch.Tensor, appearance: torch.Tensor,
                multiscale: torch.Tensor) -> torch.Tensor:
        parts = []
        for proj, f in zip(self.projections, (temporal, appearance, multiscale)):
            if f.shape[-1] != proj.in_features:
                raise FusionError(f"embedding dim {f.shape[-1]} does not match "
                                  f"projection input {proj.in_features}")
            parts.append(self._unit(proj(f)))
        w = self.weights().to(parts[0].dtype)
        return w[0] * parts[0] + w[1] * parts[1] + w[2] * parts[2]


def fuse_features(temporal, appearance, multiscale,
                  fusion: FeatureFusion) -> torch.Tensor:
    return fusion(temporal, appearance, multiscale)


# ---------------------------------------------------------------------------
# rank-list interchange files (one CSV per stream)
# ---------------------------------------------------------------------------

RANK_CSV_HEADER = ["query_id", "gallery_id", "rank", "score"]


def write_rank_lists(rank_lists: Iterable[RankedList],
                     path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RANK_CSV_HEADER)
        for rl in rank_lists:
            for rank, (g, s) in enumerate(rl.entries, start=1):
                writer.writerow([rl.query_id, g, rank, repr(s)])


def read_rank_lists(path: Union[str, Path]) -> list[RankedList]:
    path = Path(path)
    per_query: dict[str, list[tuple[int, str, float]]] = {}
    order: list[str] = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RANK_CSV_HEADER:
            raise FusionError(f"{path}: expected header {RANK_CSV_HEADER}, "
                              f"got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise FusionError(f"{path}:{lineno}: expected 4 columns")
            qid, gid, rank, score = row
            if qid not in per_query:
                per_query[qid] = []
                order.append(qid)
            per_query[qid].append((int(rank), gid, float(score)))
    lists = []
    for qid in order:
        rows = sorted(per_query[qid])
        if [r for r, _, _ in rows] != list(range(1, len(rows) + 1)):
            raise FusionError(f"{path}: ranks for {qid} are not 1..N")
        lists.append(RankedList(qid, tuple((g, s) for _, g, s in rows)))
    return lists
