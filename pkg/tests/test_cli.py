import json
from pathlib import Path

import numpy as np
import pytest

from agvp.cli import main
from agvp.datagen import load_manifest
from agvp.evalkit import read_embeddings, write_embeddings


TINY_CONFIG = {
    "seed": 13,
    "gen": {
        "num_identities": 4,
        "tracklets_per_identity_per_platform": 2,
        "altitudes": [15, 120],
        "frames_per_tracklet": 5,
        "base_image_side": 64,
    },
    "model": {
        "feat_dim": 32, "state_dim": 16, "heads": 2, "encoder_depth": 2,
        "msa_dim": 32, "msa_tapped": 2, "msa_blocks": 2, "msa_embed_dim": 24,
        "na_texels": 64, "na_channels": [16, 16, 16, 16],
        "na_pooled_rows": 12, "na_embed_dim": 32, "na_knn": 6,
        "fused_dim": 16,
    },
    "train": {
        "clip_len": 4, "frame_height": 32, "frame_width": 16,
        "square_side": 32, "batch_p": 2, "batch_k": 2, "epochs": 1,
        "steps_per_epoch": 3,
    },
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_run")
    cfg_path = root / "config.json"
    doc = dict(TINY_CONFIG)
    doc["out"] = str(root / "out")
    cfg_path.write_text(json.dumps(doc))
    return root, cfg_path


@pytest.fixture(scope="module")
def pipeline(workdir):
    """Run the full command pipeline once for the module."""
    root, cfg = workdir
    c = ["--config", str(cfg)]
    assert main(["gen"] + c) == 0
    for s in ("1", "2", "3"):
        assert main(["train", "--stream", s] + c) == 0
        assert main(["embed", "--stream", s] + c) == 0
    assert main(["train", "--stream", "fusion"] + c) == 0
    assert main(["embed", "--stream", "fusion"] + c) == 0
    assert main(["rank", "--protocol", "a2g"] + c) == 0
    return root, cfg


class TestGen:
    def test_corpus_written_with_run_manifest(self, pipeline):
        root, _ = pipeline
        corpus = root / "out" / "corpus"
        manifest = load_manifest(corpus / "manifest.jsonl")
        assert len(manifest) == 4 * 2 * 3
        run_manifest = json.loads(
            (corpus / "run_manifest_gen.json").read_text())
        assert run_manifest["command"] == "gen"
        assert run_manifest["config"]["seed"] == 13


class TestTrainEmbed:
    def test_checkpoints_logs_embeddings_exist(self, pipeline):
        root, _ = pipeline
        out = root / "out"
        for s in ("1", "2", "3"):
            assert (out / "checkpoints" / f"stream{s}.ckpt").exists()
            assert (out / "logs" / f"train_stream{s}.jsonl").exists()
            ids, mat = read_embeddings(out / "embeddings" / f"stream{s}.emb")
            assert len(ids) == 24
        assert (out / "checkpoints" / "fusion.ckpt").exists()
        ids, mat = read_embeddings(out / "embeddings" / "fused.emb")
        assert mat.shape == (24, 16)

    def test_embed_rerun_is_byte_identical(self, pipeline):
        root, cfg = pipeline
        emb = root / "out" / "embeddings" / "stream3.emb"
        before = emb.read_bytes()
        assert main(["embed", "--stream", "3", "--config", str(cfg)]) == 0
        assert emb.read_bytes() == before


class TestRankFuseEval:
    def test_rank_csvs_written(self, pipeline):
        root, _ = pipeline
        ranks = root / "out" / "ranks"
        for s in ("1", "2", "3"):
            assert (ranks / f"stream{s}_a2g_all.csv").exists()

    def test_fuse_rrf_and_eval_from_ranks(self, pipeline):
        root, cfg = pipeline
        ranks = root / "out" / "ranks"
        files = ",".join(str(ranks / f"stream{s}_a2g_all.csv")
                         for s in ("1", "2", "3"))
        assert main(["fuse", "--ranks", files, "--config", str(cfg)]) == 0
        fused = ranks / "fused_rrf.csv"
        assert fused.exists()
        assert main(["eval", "--from-ranks", str(fused), "--protocol", "a2g",
                     "--config", str(cfg)]) == 0
        metrics = json.loads(
            (root / "out" / "eval" / "metrics_ranks_a2g_all.json").read_text())
        assert "a2g/all" in metrics

    def test_eval_on_stream_embeddings(self, pipeline):
        root, cfg = pipeline
        assert main(["eval", "--stream", "2", "--protocol", "g2a",
                     "--config", str(cfg)]) == 0
        path = root / "out" / "eval" / "metrics_2_g2a_all.json"
        payload = json.loads(path.read_text())
        assert 0.0 <= payload["g2a/all"]["rank1"] <= 1.0

    def test_eval_rerun_byte_identical(self, pipeline):
        root, cfg = pipeline
        path = root / "out" / "eval" / "metrics_2_g2a_all.json"
        before = path.read_bytes()
        assert main(["eval", "--stream", "2", "--protocol", "g2a",
                     "--config", str(cfg)]) == 0
        assert path.read_bytes() == before

    def test_perfect_embeddings_reach_rank1(self, pipeline):
        root, cfg = pipeline
        corpus = root / "out" / "corpus"
        manifest = load_manifest(corpus / "manifest.jsonl")
        people = sorted({r.person_id for r in manifest.records})
        ids = [r.tracklet_id for r in manifest.records]
        mat = np.zeros((len(ids), len(people)), dtype=np.float32)
        for i, r in enumerate(manifest.records):
            mat[i, people.index(r.person_id)] = 1.0
        stub = root / "stub.emb"
        write_embeddings(stub, ids, mat)
        assert main(["eval", "--stream", "1", "--embeddings", str(stub),
                     "--protocol", "a2g", "--config", str(cfg)]) == 0
        payload = json.loads(
            (root / "out" / "eval" / "metrics_1_a2g_all.json").read_text())
        assert payload["a2g/all"]["rank1"] == 1.0
        assert payload["a2g/all"]["mean_ap"] == 1.0


class TestAblate:
    def test_seven_rows_both_directions(self, pipeline):
        root, cfg = pipeline
        assert main(["ablate", "--per-altitude", "--config", str(cfg)]) == 0
        csv_text = (root / "out" / "ablation" / "ablation.csv").read_text()
        lines = csv_text.strip().splitlines()
        assert len(lines) == 8   # header + 7 subsets
        assert lines[0].startswith("streams,a2g_rank1")
        alt_text = (root / "out" / "ablation" /
                    "ablation_altitude.csv").read_text()
        assert "rank1_15m" in alt_text and "rank1_120m" in alt_text
        assert len(alt_text.strip().splitlines()) == 1 + 7 * 2


class TestReport:
    def test_summary_and_figure(self, pipeline):
        root, cfg = pipeline
        metrics = root / "out" / "eval" / "metrics_2_g2a_all.json"
        ranks = root / "out" / "ranks" / "stream2_a2g_all.csv"
        assert main(["rank", "--stream", "2", "--protocol", "a2g",
                     "--config", str(cfg)]) == 0
        assert main(["report", "--metrics", str(metrics), "--ranks",
                     str(ranks), "--figure-queries", "4",
                     "--config", str(cfg)]) == 0
        report = root / "out" / "report"
        assert (report / "summary.txt").exists()
        assert (report / "summary.csv").exists()
        fig = report / "ranking_figure.png"
        assert fig.exists()
        before = fig.read_bytes()
        assert main(["report", "--ranks", str(ranks), "--figure-queries", "4",
                     "--config", str(cfg)]) == 0
        assert fig.read_bytes() == before


class TestErrors:
    def test_unknown_config_key_names_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"mystery_knob": 1}))
        code = main(["gen", "--config", str(bad)])
        assert code == 2
        assert "mystery_knob" in capsys.readouterr().err

    def test_missing_corpus_is_runtime_error(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"out": str(tmp_path / "fresh")}))
        code = main(["train", "--stream", "1", "--config", str(cfg)])
        assert code == 1
        assert "manifest" in capsys.readouterr().err

    def test_empty_partition_propagates(self, pipeline, capsys):
        root, cfg = pipeline
        code = main(["eval", "--stream", "1", "--protocol", "a2g",
                     "--altitude", "80", "--config", str(cfg)])
        assert code == 1
        assert "no query tracklets" in capsys.readouterr().err
