"""Artifact emission: metrics files, run manifests, and ranking figures.

Everything written here is byte-deterministic for identical inputs: no
timestamps, sorted keys, fixed canvas geometry, and no font rendering in
figures (correct/incorrect marks are colored borders).
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .core import load_frame, pad_and_resize
from .datagen import Manifest
from .evalkit import AblationTable, MetricsReport
from .fusion import RankedList


def sha256_file(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(out_dir: Union[str, Path], command: str,
                       inputs: Sequence[Union[str, Path]],
                       effective_config: Mapping) -> Path:
    """Record input hashes and the effective config beside the outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "inputs": {str(p): sha256_file(p) for p in sorted(map(str, inputs))},
        "config": effective_config,
    }
    path = out_dir / f"run_manifest_{command}.json"
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def write_metrics(report: MetricsReport, out_dir: Union[str, Path],
                  stem: str = "metrics") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    text_path = out_dir / f"{stem}.txt"
    json_path.write_text(report.to_json(), encoding="utf-8")
    text_path.write_text(report.to_text(), encoding="utf-8")
    return [json_path, text_path]


def write_ablation(table: AblationTable, out_dir: Union[str, Path],
                   stem: str = "ablation") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    text_path = out_dir / f"{stem}.txt"
    csv_path.write_text(table.to_csv(), encoding="utf-8")
    text_path.write_text(table.to_text(), encoding="utf-8")
    return [csv_path, text_path]


def summarize_metric_files(paths: Sequence[Union[str, Path]]) -> dict:
    """Merge several metrics.json files into one summary document."""
    merged: dict = {}
    for p in sorted(map(str, paths)):
        payload = json.loads(Path(p).read_text(encoding="utf-8"))
        merged[Path(p).stem + ":" + Path(p).parent.name] = payload
    return merged


def summary_text(summary: Mapping) -> str:
    lines = []
    for source, buckets in sorted(summary.items()):
        lines.append(source)
        for bucket, m in sorted(buckets.items()):
            lines.append(f"  {bucket:<12} rank1={m['rank1']:.4f} "
                         f"rank5={m['rank5']:.4f} rank10={m['rank10']:.4f} "
                         f"mAP={m['mean_ap']:.4f}")
    return "\n".join(lines) + "\n"


def summary_csv(summary: Mapping) -> str:
    lines = ["source,bucket,rank1,rank5,rank10,map"]
    for source, buckets in sorted(summary.items()):
        for bucket, m in sorted(buckets.items()):
            lines.append(f"{source},{bucket},{m['rank1']:.6f},"
                         f"{m['rank5']:.6f},{m['rank10']:.6f},"
                         f"{m['mean_ap']:.6f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# ranking figures: query strip + top-k gallery strip with colored marks
# ---------------------------------------------------------------------------

THUMB = 48          # square thumbnail side
BORDER = 3
GAP = 4
CORRECT = np.array([0.15, 0.75, 0.2])
WRONG = np.array([0.85, 0.2, 0.15])
NEUTRAL = np.array([0.25, 0.25, 0.3])


def _thumb(manifest: Manifest, tracklet_id: str) -> np.ndarray:
    rec = next(r for r in manifest.records if r.tracklet_id == tracklet_id)
    frame = load_frame(Path(manifest.root) / rec.frames[0])
    return pad_and_resize(frame, THUMB).pixels


def _framed(img: np.ndarray, color: np.ndarray) -> np.ndarray:
    side = THUMB + 2 * BORDER
    out = np.tile(color, (side, side, 1))
    out[BORDER:-BORDER, BORDER:-BORDER] = img
    return out


def render_ranking_figure(manifest: Manifest, ranked: Sequence[RankedList],
                          out_path: Union[str, Path], top_k: int = 5,
                          max_queries: int = 8) -> Path:
    """One row per query: the query thumbnail, a gap, then the top-k
    gallery thumbnails framed green (same identity) or red."""
    from PIL import Image

    person = {r.tracklet_id: r.person_id for r in manifest.records}
    rows = []
    for rl in ranked[:max_queries]:
        cells = [_framed(_thumb(manifest, rl.query_id), NEUTRAL)]
        for gid, _ in rl.entries[:top_k]:
            ok = person[gid] == person[rl.query_id]
            cells.append(_framed(_thumb(manifest, gid),
                                 CORRECT if ok else WRONG))
        rows.append(cells)
    if not rows:
        raise ValueError("no queries to render")
    cell = THUMB + 2 * BORDER
    width = GAP + (top_k + 1) * (cell + GAP)
    height = GAP + len(rows) * (cell + GAP)
    canvas = np.ones((height, width, 3))
    for i, cells in enumerate(rows):
        y = GAP + i * (cell + GAP)
        for j, img in enumerate(cells):
            x = GAP + j * (cell + GAP)
            canvas[y:y + cell, x:x + cell] = img
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.round(canvas * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(out_path)
    return out_path
