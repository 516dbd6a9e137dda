"""Retrieval evaluation harness.

Distance computation, deterministic ranking with a fixed tie rule,
CMC/mAP metrics, protocol-stratified evaluation (aerial-to-ground and
ground-to-aerial with altitude buckets, gallery distractors, and
clothing-change filters), and the stream-ablation table.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .datagen import Manifest, ManifestRecord
from .fusion import RankedList, rrf


class EvalError(ValueError):
    pass


class EmptyPartitionError(EvalError):
    """A protocol selected an empty query or gallery set."""


DIRECTIONS = ("a2g", "g2a")
ALTITUDES = ("all", 15, 30, 80, 120)
CLOTHING_MODES = ("all", "same", "different")
STREAM_SUBSETS = (("1",), ("2",), ("3",), ("1", "2"), ("1", "3"),
                  ("2", "3"), ("1", "2", "3"))


def subset_label(subset: Sequence[str]) -> str:
    return "St-" + "".join(subset)


# ---------------------------------------------------------------------------
# distances and ranking
# ---------------------------------------------------------------------------

def distances(queries: np.ndarray, gallery: np.ndarray,
              metric: str = "cosine") -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise EvalError(f"embedding dims differ: {q.shape} vs {g.shape}")
    if metric == "cosine":
        qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        return 1.0 - qn @ gn.T
    if metric == "euclidean":
        diff = q[:, None, :] - g[None, :, :]
        return np.sqrt((diff ** 2).sum(axis=2))
    raise EvalError(f"unknown metric {metric!r}")


def rank(dist_matrix: np.ndarray, query_ids: Sequence[str],
         gallery_ids: Sequence[str]) -> list[RankedList]:
    """Ascending-distance ordering per query; ties by ascending gallery id."""
    d = np.asarray(dist_matrix, dtype=np.float64)
    if d.shape != (len(query_ids), len(gallery_ids)):
        raise EvalError(f"distance matrix {d.shape} does not match "
                        f"{len(query_ids)} x {len(gallery_ids)} ids")
    if len(gallery_ids) == 0:
        raise EvalError("empty gallery")
    out = []
    for qi, qid in enumerate(query_ids):
        order = sorted(range(len(gallery_ids)),
                       key=lambda j: (d[qi, j], gallery_ids[j]))
        out.append(RankedList(qid, tuple(
            (gallery_ids[j], -d[qi, j]) for j in order)))
    return out


# ---------------------------------------------------------------------------
# CMC / mAP
# ---------------------------------------------------------------------------

def _relevance(rl: RankedList, query_label: str,
               gallery_labels: Mapping[str, str]) -> np.ndarray:
    return np.array([gallery_labels[g] == query_label for g, _ in rl.entries],
                    dtype=bool)


def cmc(ranked: Sequence[RankedList], query_labels: Mapping[str, str],
        gallery_labels: Mapping[str, str], k: int) -> float:
    """Fraction of valid queries whose first correct match is at rank <= k.

    Queries with no correct gallery match are excluded from the
    denominator.
    """
    if k < 1:
        raise EvalError("k must be >= 1")
    hits = 0
    valid = 0
    for rl in ranked:
        rel = _relevance(rl, query_labels[rl.query_id], gallery_labels)
        if not rel.any():
            continue
        valid += 1
        if rel[:k].any():
            hits += 1
    if valid == 0:
        raise EvalError("no query has a correct gallery match")
    return hits / valid


def map_metric(ranked: Sequence[RankedList], query_labels: Mapping[str, str],
               gallery_labels: Mapping[str, str]) -> float:
    """Mean over valid queries of average precision."""
    aps = []
    for rl in ranked:
        rel = _relevance(rl, query_labels[rl.query_id], gallery_labels)
        num_rel = int(rel.sum())
        if num_rel == 0:
            continue
        cum_hits = np.cumsum(rel)
        positions = np.nonzero(rel)[0] + 1
        precisions = cum_hits[positions - 1] / positions
        aps.append(precisions.sum() / num_rel)
    if not aps:
        raise EvalError("no query has a correct gallery match")
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# protocol evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProtocolSpec:
    """Query/gallery split: direction, altitude bucket, distractors, clothing.

    a2g queries are the aerial tracklets (altitude filter applies to them);
    g2a queries are the ground tracklets and the altitude filter selects
    the aerial gallery. Distractors are gallery identities with no
    query-side tracklet; clothing modes restrict which same-identity
    gallery items count (others are removed from that query's ranking).
    """

    direction: str = "a2g"
    altitude: Union[str, int] = "all"
    include_distractors: bool = True
    clothing: str = "all"

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise EvalError(f"direction must be one of {DIRECTIONS}")
        if self.altitude not in ALTITUDES:
            raise EvalError(f"altitude must be one of {ALTITUDES}")
        if self.clothing not in CLOTHING_MODES:
            raise EvalError(f"clothing must be one of {CLOTHING_MODES}")

    @property
    def bucket(self) -> str:
        return f"{self.direction}/{self.altitude}"


@dataclass
class BucketMetrics:
    rank1: float
    rank5: float
    rank10: float
    mean_ap: float
    num_queries: int
    num_gallery: int
    num_excluded_queries: int = 0

    def __post_init__(self):
        for v in (self.rank1, self.rank5, self.rank10, self.mean_ap):
            if not 0.0 <= v <= 1.0:
                raise EvalError(f"metric out of range: {v}")
        if not self.rank1 <= self.rank5 <= self.rank10:
            raise EvalError("CMC must be nondecreasing in k")


@dataclass
class MetricsReport:
    buckets: dict[str, BucketMetrics] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {name: vars(m) for name, m in sorted(self.buckets.items())}
        return json.dumps(payload, indent=1, sort_keys=True) + "\n"

    def to_text(self) -> str:
        header = f"{'bucket':<12} {'rank1':>7} {'rank5':>7} {'rank10':>7} " \
                 f"{'mAP':>7} {'#q':>5} {'#g':>5} {'#excl':>6}"
        lines = [header, "-" * len(header)]
        for name, m in sorted(self.buckets.items()):
            lines.append(f"{name:<12} {m.rank1:7.4f} {m.rank5:7.4f} "
                         f"{m.rank10:7.4f} {m.mean_ap:7.4f} "
                         f"{m.num_queries:5d} {m.num_gallery:5d} "
                         f"{m.num_excluded_queries:6d}")
        return "\n".join(lines) + "\n"


def _split_records(records: Sequence[ManifestRecord], protocol: ProtocolSpec
                   ) -> tuple[list[ManifestRecord], list[ManifestRecord]]:
    aerial = [r for r in records if r.platform == "aerial"]
    ground = [r for r in records if r.platform != "aerial"]
    if protocol.direction == "a2g":
        queries, gallery = aerial, ground
        if protocol.altitude != "all":
            queries = [r for r in queries if r.altitude_m == protocol.altitude]
    else:
        queries, gallery = ground, aerial
        if protocol.altitude != "all":
            gallery = [r for r in gallery if r.altitude_m == protocol.altitude]
    if not protocol.include_distractors:
        query_people = {r.person_id for r in queries}
        gallery = [r for r in gallery if r.person_id in query_people]
    if not queries:
        raise EmptyPartitionError(f"no query tracklets for {protocol.bucket}")
    if not gallery:
        raise EmptyPartitionError(f"no gallery tracklets for {protocol.bucket}")
    return queries, gallery


def _clothing_junk(protocol: ProtocolSpec, query: ManifestRecord,
                   gallery: Sequence[ManifestRecord]) -> set[str]:
    """Gallery tracklets removed from this query's ranking."""
    if protocol.clothing == "all":
        return set()
    junk = set()
    for g in gallery:
        if g.person_id != query.person_id:
            continue
        same = g.clothing_id == query.clothing_id
        if protocol.clothing == "same" and not same:
            junk.add(g.tracklet_id)
        elif protocol.clothing == "different" and same:
            junk.add(g.tracklet_id)
    return junk


def ranked_lists_for_protocol(
        protocol: ProtocolSpec, records: Sequence[ManifestRecord],
        embeddings: Mapping[str, np.ndarray], metric: str = "cosine"
) -> tuple[list[RankedList], dict[str, str], dict[str, str]]:
    """Per-query (junk-filtered) rankings plus query/gallery label maps."""
    queries, gallery = _split_records(records, protocol)
    missing = [r.tracklet_id for r in queries + gallery
               if r.tracklet_id not in embeddings]
    if missing:
        raise EvalError(f"embeddings missing for tracklets {missing[:5]}"
                        + ("..." if len(missing) > 5 else ""))
    q_mat = np.stack([np.asarray(embeddings[r.tracklet_id], dtype=np.float64)
                      for r in queries])
    g_mat = np.stack([np.asarray(embeddings[r.tracklet_id], dtype=np.float64)
                      for r in gallery])
    ranked = rank(distances(q_mat, g_mat, metric),
                  [r.tracklet_id for r in queries],
                  [r.tracklet_id for r in gallery])
    if protocol.clothing != "all":
        filtered = []
        for rl, q in zip(ranked, queries):
            junk = _clothing_junk(protocol, q, gallery)
            filtered.append(RankedList(rl.query_id, tuple(
                e for e in rl.entries if e[0] not in junk)))
        ranked = filtered
    query_labels = {r.tracklet_id: r.person_id for r in queries}
    gallery_labels = {r.tracklet_id: r.person_id for r in gallery}
    return ranked, query_labels, gallery_labels


def metrics_from_ranked(ranked: Sequence[RankedList],
                        query_labels: Mapping[str, str],
                        gallery_labels: Mapping[str, str],
                        num_gallery: Optional[int] = None) -> BucketMetrics:
    valid = [rl for rl in ranked
             if _relevance(rl, query_labels[rl.query_id], gallery_labels).any()]
    if not valid:
        raise EmptyPartitionError("every query lacks a correct gallery match")
    return BucketMetrics(
        rank1=cmc(valid, query_labels, gallery_labels, 1),
        rank5=cmc(valid, query_labels, gallery_labels, 5),
        rank10=cmc(valid, query_labels, gallery_labels, 10),
        mean_ap=map_metric(valid, query_labels, gallery_labels),
        num_queries=len(valid),
        num_gallery=num_gallery if num_gallery is not None
        else len(gallery_labels),
        num_excluded_queries=len(ranked) - len(valid))


def evaluate(protocol: ProtocolSpec,
             manifest: Union[Manifest, Sequence[ManifestRecord]],
             embeddings: Mapping[str, np.ndarray],
             metric: str = "cosine") -> MetricsReport:
    records = manifest.records if isinstance(manifest, Manifest) else manifest
    ranked, q_labels, g_labels = ranked_lists_for_protocol(
        protocol, records, embeddings, metric)
    report = MetricsReport()
    report.buckets[protocol.bucket] = metrics_from_ranked(ranked, q_labels,
                                                          g_labels)
    return report


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

@dataclass
class AblationTable:
    """7 stream-subset rows x metric columns, per evaluation direction."""

    rows: list = field(default_factory=list)  # (label, {direction: BucketMetrics})

    def to_csv(self) -> str:
        dirs = sorted(self.rows[0][1]) if self.rows else []
        cols = ["streams"]
        for d in dirs:
            cols += [f"{d}_rank1", f"{d}_rank5", f"{d}_rank10", f"{d}_map"]
        lines = [",".join(cols)]
        for label, per_dir in self.rows:
            vals = [label]
            for d in dirs:
                m = per_dir[d]
                vals += [f"{m.rank1:.6f}", f"{m.rank5:.6f}",
                         f"{m.rank10:.6f}", f"{m.mean_ap:.6f}"]
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        dirs = sorted(self.rows[0][1]) if self.rows else []
        header = f"{'streams':<8}"
        for d in dirs:
            header += f" | {d + ' r1':>8} {d + ' r5':>8} {d + ' r10':>9}"
        lines = [header, "-" * len(header)]
        for label, per_dir in self.rows:
            line = f"{label:<8}"
            for d in dirs:
                m = per_dir[d]
                line += f" | {m.rank1:8.4f} {m.rank5:8.4f} {m.rank10:9.4f}"
            lines.append(line)
        return "\n".join(lines) + "\n"

    def get(self, label: str, direction: str) -> BucketMetrics:
        for row_label, per_dir in self.rows:
            if row_label == label:
                return per_dir[direction]
        raise EvalError(f"no ablation row {label}")


def ablate(manifest: Union[Manifest, Sequence[ManifestRecord]],
           stream_embeddings: Mapping[str, Mapping[str, np.ndarray]],
           altitude: Union[str, int] = "all",
           include_distractors: bool = True,
           clothing: str = "all",
           metric: str = "cosine",
           rrf_k: int = 60) -> AblationTable:
    """Evaluate every stream subset in both directions.

    Single-stream rows reuse that stream's ranking; multi-stream rows fuse
    the member streams' rankings with reciprocal rank fusion.
    """
    records = manifest.records if isinstance(manifest, Manifest) else manifest
    if set(stream_embeddings) != {"1", "2", "3"}:
        raise EvalError("ablation needs embeddings for streams '1', '2', '3'")
    per_dir_ranked = {}
    labels = {}
    for direction in DIRECTIONS:
        protocol = ProtocolSpec(direction=direction, altitude=altitude,
                                include_distractors=include_distractors,
                                clothing=clothing)
        ranked = {}
        for stream, emb in sorted(stream_embeddings.items()):
            ranked[stream], q_labels, g_labels = ranked_lists_for_protocol(
                protocol, records, emb, metric)
        per_dir_ranked[direction] = ranked
        labels[direction] = (q_labels, g_labels)
    table = AblationTable()
    for subset in STREAM_SUBSETS:
        per_dir = {}
        for direction in DIRECTIONS:
            ranked = per_dir_ranked[direction]
            q_labels, g_labels = labels[direction]
            if len(subset) == 1:
                fused = ranked[subset[0]]
            else:
                fused = [rrf([ranked[s][qi] for s in subset], k=rrf_k)
                         for qi in range(len(ranked[subset[0]]))]
            per_dir[direction] = metrics_from_ranked(fused, q_labels, g_labels)
        table.rows.append((subset_label(subset), per_dir))
    return table


# ---------------------------------------------------------------------------
# embedding container: text header + little-endian float32 rows + id sidecar
# ---------------------------------------------------------------------------

EMB_MAGIC = "AGVPEMB"
EMB_VERSION = 1


def ids_path(path: Union[str, Path]) -> Path:
    return Path(str(path) + ".ids")


def write_embeddings(path: Union[str, Path], tracklet_ids: Sequence[str],
                     matrix: np.ndarray) -> None:
    mat = np.ascontiguousarray(np.asarray(matrix, dtype=np.float32))
    if mat.ndim != 2:
        raise EvalError("embedding matrix must be 2-D")
    if len(tracklet_ids) != mat.shape[0]:
        raise EvalError(f"{len(tracklet_ids)} ids for {mat.shape[0]} rows")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"{EMB_MAGIC} {EMB_VERSION} {mat.shape[1]} {mat.shape[0]}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(mat.astype("<f4").tobytes())
    ids_path(path).write_text("".join(t + "\n" for t in tracklet_ids),
                              encoding="utf-8")


def read_embeddings(path: Union[str, Path]) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").split()
        if len(header) != 4 or header[0] != EMB_MAGIC:
            raise EvalError(f"{path}: not an embedding container")
        if int(header[1]) != EMB_VERSION:
            raise EvalError(f"{path}: unsupported version {header[1]}")
        dim, count = int(header[2]), int(header[3])
        payload = fh.read()
    expected = dim * count * 4
    if len(payload) != expected:
        raise EvalError(f"{path}: truncated payload ({len(payload)} bytes, "
                        f"expected {expected})")
    mat = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    sidecar = ids_path(path)
    if not sidecar.exists():
        raise EvalError(f"{path}: id sidecar {sidecar} missing")
    ids = sidecar.read_text(encoding="utf-8").splitlines()
    if len(ids) != count:
        raise EvalError(f"{path}: {len(ids)} ids for {count} rows")
    return ids, mat.copy()


def embeddings_as_dict(ids: Sequence[str], matrix: np.ndarray
                       ) -> dict[str, np.ndarray]:
    return {t: matrix[i] for i, t in enumerate(ids)}
