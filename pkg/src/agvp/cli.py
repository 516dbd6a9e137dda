"""Operator entry point.

Subcommands: gen | train | embed | rank | fuse | eval | ablate | report.
Every command is deterministic given config + seed, writes its outputs
under the configured output root, and drops a run manifest (input hashes
plus the effective config) beside them.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError, RunConfig, load_run_config
from .core import CoreError
from .datagen import DatagenError, Manifest, SyntheticUVOracle, generate_corpus, load_manifest
from .evalkit import (
    EvalError,
    MetricsReport,
    ProtocolSpec,
    ablate,
    embeddings_as_dict,
    evaluate,
    metrics_from_ranked,
    ranked_lists_for_protocol,
    read_embeddings,
    write_embeddings,
)
from .fusion import FusionError, read_rank_lists, rrf, write_rank_lists
from .report import (
    render_ranking_figure,
    summarize_metric_files,
    summary_csv,
    summary_text,
    write_ablation,
    write_metrics,
    write_run_manifest,
)
from .streams.appearance import AppearanceError
from .trainer import (
    TrainerError,
    build_trainable,
    class_index,
    embed_manifest,
    fuse_manifest_embeddings,
    load_checkpoint,
    load_state_arrays,
    save_checkpoint,
    state_arrays,
    train_fusion,
    train_stream,
)

USAGE_ERRORS = (ConfigError, argparse.ArgumentTypeError)
RUNTIME_ERRORS = (CoreError, DatagenError, EvalError, FusionError,
                  TrainerError, AppearanceError, FileNotFoundError)


def _altitude(value: str):
    return value if value == "all" else int(value)


def _paths(cfg: RunConfig) -> dict[str, Path]:
    return {
        "checkpoints": cfg.out / "checkpoints",
        "logs": cfg.out / "logs",
        "embeddings": cfg.out / "embeddings",
        "ranks": cfg.out / "ranks",
        "eval": cfg.out / "eval",
        "ablation": cfg.out / "ablation",
        "report": cfg.out / "report",
    }


def _load_corpus(cfg: RunConfig) -> Manifest:
    manifest_path = cfg.corpus_dir / "manifest.jsonl"
    if not manifest_path.exists():
        raise DatagenError(f"no manifest at {manifest_path}; run `gen` first "
                           "or point --config at an existing corpus")
    return load_manifest(manifest_path)


def _embedding_file(cfg: RunConfig, stream: str) -> Path:
    name = "fused.emb" if stream == "fusion" else f"stream{stream}.emb"
    return _paths(cfg)["embeddings"] / name


def _read_embedding_dict(path: Path):
    ids, mat = read_embeddings(path)
    return embeddings_as_dict(ids, mat)


def _protocol(cfg: RunConfig, args) -> ProtocolSpec:
    altitude = args.altitude if args.altitude is not None else cfg.eval.altitude
    distractors = cfg.eval.distractors
    if args.distractors is not None:
        distractors = args.distractors == "on"
    return ProtocolSpec(direction=args.protocol, altitude=altitude,
                        include_distractors=distractors,
                        clothing=cfg.eval.clothing)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(cfg: RunConfig, args) -> int:
    manifest = generate_corpus(cfg.gen, cfg.corpus_dir)
    write_run_manifest(cfg.corpus_dir, "gen", [], cfg.effective)
    print(f"wrote {len(manifest)} tracklets to {cfg.corpus_dir}")
    return 0


def _train_one_stream(cfg: RunConfig, stream: str) -> None:
    manifest = _load_corpus(cfg)
    trainable, log = train_stream(stream, manifest, cfg.train, cfg.hyper)
    paths = _paths(cfg)
    ckpt = paths["checkpoints"] / f"stream{stream}.ckpt"
    num_classes = len(class_index(manifest.to_tracklets()))
    save_checkpoint(state_arrays(trainable.model), ckpt, cfg.train,
                    extra={"stream": stream, "num_classes": num_classes})
    paths["logs"].mkdir(parents=True, exist_ok=True)
    log_path = paths["logs"] / f"train_stream{stream}.jsonl"
    log_path.write_text(
        "".join(json.dumps(e, sort_keys=True) + "\n" for e in log),
        encoding="utf-8")
    write_run_manifest(paths["checkpoints"], f"train_stream{stream}",
                       [cfg.corpus_dir / "manifest.jsonl"], cfg.effective)
    print(f"stream {stream}: final loss "
          f"{log[-1]['loss_total']:.4f} -> {ckpt}")


def _train_fusion(cfg: RunConfig) -> None:
    manifest = _load_corpus(cfg)
    streams = {s: _read_embedding_dict(_embedding_file(cfg, s))
               for s in ("1", "2", "3")}
    trainable, log = train_fusion(manifest, streams, cfg.train,
                                  fused_dim=cfg.hyper.fused_dim)
    paths = _paths(cfg)
    ckpt = paths["checkpoints"] / "fusion.ckpt"
    arrays = {f"fusion.{k}": v
              for k, v in state_arrays(trainable.fusion).items()}
    arrays.update({f"head.{k}": v
                   for k, v in state_arrays(trainable.head).items()})
    in_dims = [int(p.in_features) for p in trainable.fusion.projections]
    save_checkpoint(arrays, ckpt, cfg.train,
                    extra={"stream": "fusion", "in_dims": in_dims,
                           "fused_dim": cfg.hyper.fused_dim,
                           "num_classes": trainable.head.out_features})
    paths["logs"].mkdir(parents=True, exist_ok=True)
    (paths["logs"] / "train_fusion.jsonl").write_text(
        "".join(json.dumps(e, sort_keys=True) + "\n" for e in log),
        encoding="utf-8")
    write_run_manifest(paths["checkpoints"], "train_fusion",
                       [_embedding_file(cfg, s) for s in ("1", "2", "3")],
                       cfg.effective)
    print(f"fusion weights {log[-1]['weights']} -> {ckpt}")


def cmd_train(cfg: RunConfig, args) -> int:
    if args.stream == "fusion":
        _train_fusion(cfg)
    else:
        _train_one_stream(cfg, args.stream)
    return 0


def _rebuild_trainable(cfg: RunConfig, stream: str, ckpt_path: Path,
                       manifest: Manifest):
    params, _, extra = load_checkpoint(ckpt_path)
    num_classes = int(extra.get("num_classes", 0))
    if num_classes < 1:
        raise TrainerError(f"{ckpt_path}: checkpoint lacks class count")
    extractor = None
    if stream == "2":
        extractor = SyntheticUVOracle(cfg.corpus_dir)
    import torch

    torch.manual_seed(cfg.train.seed)
    trainable = build_trainable(stream, cfg.train, cfg.hyper, num_classes,
                                extractor)
    load_state_arrays(trainable.model, params)
    trainable.model.eval()
    return trainable


def cmd_embed(cfg: RunConfig, args) -> int:
    manifest = _load_corpus(cfg)
    paths = _paths(cfg)
    if args.stream == "fusion":
        from .fusion import FeatureFusion
        import torch

        ckpt = Path(args.checkpoint) if args.checkpoint else \
            paths["checkpoints"] / "fusion.ckpt"
        params, _, extra = load_checkpoint(ckpt)
        fusion = FeatureFusion(tuple(extra["in_dims"]),
                               int(extra["fused_dim"]))
        load_state_arrays(fusion, {
            k[len("fusion."):]: v for k, v in params.items()
            if k.startswith("fusion.")})
        streams = {s: _read_embedding_dict(_embedding_file(cfg, s))
                   for s in ("1", "2", "3")}
        fused = fuse_manifest_embeddings(fusion, streams)
        ids = [r.tracklet_id for r in manifest.records]
        mat = np.stack([fused[t] for t in ids])
        out = _embedding_file(cfg, "fusion")
        write_embeddings(out, ids, mat)
        inputs = [ckpt] + [_embedding_file(cfg, s) for s in ("1", "2", "3")]
    else:
        ckpt = Path(args.checkpoint) if args.checkpoint else \
            paths["checkpoints"] / f"stream{args.stream}.ckpt"
        trainable = _rebuild_trainable(cfg, args.stream, ckpt, manifest)
        ids, mat = embed_manifest(trainable, manifest)
        out = _embedding_file(cfg, args.stream)
        write_embeddings(out, ids, mat)
        inputs = [ckpt, cfg.corpus_dir / "manifest.jsonl"]
    write_run_manifest(paths["embeddings"], f"embed_stream{args.stream}",
                       inputs, cfg.effective)
    print(f"wrote {len(ids)} x {mat.shape[1]} embeddings -> {out}")
    return 0


def cmd_rank(cfg: RunConfig, args) -> int:
    manifest = _load_corpus(cfg)
    protocol = _protocol(cfg, args)
    paths = _paths(cfg)
    streams = args.stream.split(",") if args.stream else ["1", "2", "3"]
    written = []
    for stream in streams:
        emb_path = Path(args.embeddings) if args.embeddings else \
            _embedding_file(cfg, stream)
        emb = _read_embedding_dict(emb_path)
        ranked, _, _ = ranked_lists_for_protocol(protocol, manifest.records,
                                                 emb, cfg.eval.metric)
        name = "fused" if stream == "fusion" else f"stream{stream}"
        out = paths["ranks"] / \
            f"{name}_{protocol.direction}_{protocol.altitude}.csv"
        write_rank_lists(ranked, out)
        written.append(out)
        print(f"wrote rank lists -> {out}")
    write_run_manifest(paths["ranks"], f"rank_{protocol.direction}",
                       [cfg.corpus_dir / "manifest.jsonl"], cfg.effective)
    return 0


def cmd_fuse(cfg: RunConfig, args) -> int:
    paths = _paths(cfg)
    if args.ranks:
        files = [Path(p) for p in args.ranks.split(",")]
        if len(files) != 3:
            raise FusionError("rank fusion needs exactly three CSV files")
        per_stream = [read_rank_lists(p) for p in files]
        counts = {len(lists) for lists in per_stream}
        if len(counts) != 1:
            raise FusionError("rank lists disagree on query count")
        fused = [rrf([per_stream[s][i] for s in range(3)], k=cfg.eval.rrf_k)
                 for i in range(len(per_stream[0]))]
        out = paths["ranks"] / (args.out_name or "fused_rrf.csv")
        write_rank_lists(fused, out)
        write_run_manifest(paths["ranks"], "fuse_rrf", files, cfg.effective)
        print(f"wrote fused rank lists -> {out}")
        return 0
    # feature-level fusion goes through the fusion checkpoint
    args.stream = "fusion"
    args.checkpoint = args.checkpoint or None
    return cmd_embed(cfg, args)


def cmd_eval(cfg: RunConfig, args) -> int:
    manifest = _load_corpus(cfg)
    protocol = _protocol(cfg, args)
    paths = _paths(cfg)
    stem = f"metrics_{args.stream or 'ranks'}_{protocol.direction}_" \
           f"{protocol.altitude}"
    if args.from_ranks:
        ranked = read_rank_lists(args.from_ranks)
        person = {r.tracklet_id: r.person_id for r in manifest.records}
        q_labels = {rl.query_id: person[rl.query_id] for rl in ranked}
        g_labels = {g: person[g] for rl in ranked for g, _ in rl.entries}
        report = MetricsReport()
        report.buckets[protocol.bucket] = metrics_from_ranked(
            ranked, q_labels, g_labels)
        inputs = [Path(args.from_ranks)]
    else:
        emb_path = Path(args.embeddings) if args.embeddings else \
            _embedding_file(cfg, args.stream or "1")
        emb = _read_embedding_dict(emb_path)
        report = evaluate(protocol, manifest, emb, cfg.eval.metric)
        inputs = [emb_path]
    files = write_metrics(report, paths["eval"], stem)
    write_run_manifest(paths["eval"], stem, inputs, cfg.effective)
    print(report.to_text(), end="")
    print(f"wrote {files[0]} and {files[1]}")
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    manifest = _load_corpus(cfg)
    paths = _paths(cfg)
    streams = {s: _read_embedding_dict(_embedding_file(cfg, s))
               for s in ("1", "2", "3")}
    altitude = args.altitude if args.altitude is not None else "all"
    table = ablate(manifest, streams, altitude=altitude,
                   include_distractors=cfg.eval.distractors,
                   clothing=cfg.eval.clothing, metric=cfg.eval.metric,
                   rrf_k=cfg.eval.rrf_k)
    files = write_ablation(table, paths["ablation"])
    if args.per_altitude:
        altitudes = sorted({r.altitude_m for r in manifest.records
                            if r.platform == "aerial"})
        lines = ["streams,direction," +
                 ",".join(f"rank1_{a}m" for a in altitudes)]
        per_alt = {a: ablate(manifest, streams, altitude=a,
                             include_distractors=cfg.eval.distractors,
                             clothing=cfg.eval.clothing,
                             metric=cfg.eval.metric, rrf_k=cfg.eval.rrf_k)
                   for a in altitudes}
        for label, _ in table.rows:
            for direction in ("a2g", "g2a"):
                vals = [f"{per_alt[a].get(label, direction).rank1:.6f}"
                        for a in altitudes]
                lines.append(f"{label},{direction}," + ",".join(vals))
        alt_csv = paths["ablation"] / "ablation_altitude.csv"
        alt_csv.write_text("\n".join(lines) + "\n", encoding="utf-8")
        files.append(alt_csv)
        print(f"wrote {alt_csv}")
    write_run_manifest(paths["ablation"], "ablate",
                       [_embedding_file(cfg, s) for s in ("1", "2", "3")],
                       cfg.effective)
    print(table.to_text(), end="")
    print(f"wrote {files[0]} and {files[1]}")
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    paths = _paths(cfg)
    out_dir = paths["report"]
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = []
    if args.metrics:
        metric_files = [Path(p) for p in args.metrics.split(",")]
        summary = summarize_metric_files(metric_files)
        (out_dir / "summary.json").write_text(
            json.dumps(summary, indent=1, sort_keys=True) + "\n",
            encoding="utf-8")
        (out_dir / "summary.txt").write_text(summary_text(summary),
                                             encoding="utf-8")
        (out_dir / "summary.csv").write_text(summary_csv(summary),
                                             encoding="utf-8")
        inputs.extend(metric_files)
        print(f"wrote summary files to {out_dir}")
    if args.ranks:
        manifest = _load_corpus(cfg)
        ranked = read_rank_lists(args.ranks)
        fig = render_ranking_figure(manifest, ranked,
                                    out_dir / "ranking_figure.png",
                                    top_k=5, max_queries=args.figure_queries)
        inputs.append(Path(args.ranks))
        print(f"wrote {fig}")
    if not inputs:
        raise ConfigError("report needs --metrics and/or --ranks")
    write_run_manifest(out_dir, "report", inputs, cfg.effective)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agvp",
        description="aerial-ground video person re-identification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", help="override output root")

    p = sub.add_parser("gen", help="write the synthetic corpus")
    common(p)

    p = sub.add_parser("train", help="train one stream or the fusion head")
    common(p)
    p.add_argument("--stream", required=True,
                   choices=["1", "2", "3", "fusion"])

    p = sub.add_parser("embed", help="write embeddings for the corpus")
    common(p)
    p.add_argument("--stream", required=True,
                   choices=["1", "2", "3", "fusion"])
    p.add_argument("--checkpoint", help="checkpoint path override")

    p = sub.add_parser("rank", help="write per-stream rank-list CSVs")
    common(p)
    p.add_argument("--stream", help="comma list, default 1,2,3")
    p.add_argument("--embeddings", help="explicit embeddings file")
    p.add_argument("--protocol", choices=["a2g", "g2a"], default="a2g")
    p.add_argument("--altitude", type=_altitude,
                   choices=["all", 15, 30, 80, 120], default=None)
    p.add_argument("--distractors", choices=["on", "off"], default=None)

    p = sub.add_parser("fuse", help="fuse rank lists (RRF) or features")
    common(p)
    p.add_argument("--ranks", help="three rank CSVs, comma separated")
    p.add_argument("--checkpoint", help="fusion checkpoint for feature mode")
    p.add_argument("--out-name", help="output file name")
    p.add_argument("--stream", help=argparse.SUPPRESS)

    p = sub.add_parser("eval", help="compute CMC/mAP for a protocol")
    common(p)
    p.add_argument("--stream", choices=["1", "2", "3", "fusion"])
    p.add_argument("--embeddings", help="explicit embeddings file")
    p.add_argument("--from-ranks", help="evaluate a rank-list CSV instead")
    p.add_argument("--protocol", choices=["a2g", "g2a"], default="a2g")
    p.add_argument("--altitude", type=_altitude,
                   choices=["all", 15, 30, 80, 120], default=None)
    p.add_argument("--distractors", choices=["on", "off"], default=None)

    p = sub.add_parser("ablate", help="7-row stream-subset table, both "
                                      "directions")
    common(p)
    p.add_argument("--altitude", type=_altitude,
                   choices=["all", 15, 30, 80, 120], default=None)
    p.add_argument("--per-altitude", action="store_true",
                   help="also emit per-altitude rank-1 stratification")

    p = sub.add_parser("report", help="summaries and ranking figures")
    common(p)
    p.add_argument("--metrics", help="metrics JSON files, comma separated")
    p.add_argument("--ranks", help="rank CSV for the ranking figure")
    p.add_argument("--figure-queries", type=int, default=8)
    return parser


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "embed": cmd_embed,
    "rank": cmd_rank,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        cfg = load_run_config(args.config, cli_overrides=overrides)
        return COMMANDS[args.command](cfg, args)
    except USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
