import json

import pytest

from agvp.config import (
    ConfigError,
    apply_env_overrides,
    build_run_config,
    load_run_config,
)
from agvp.core import Platform


class TestDefaults:
    def test_empty_doc_gives_defaults(self):
        cfg = build_run_config({})
        assert cfg.seed == 0
        assert cfg.gen.num_identities == 8
        assert cfg.train.lr == 5e-3
        assert cfg.train.weight_decay == 0.01
        assert cfg.train.clip_len == 8
        assert cfg.eval.metric == "cosine"
        assert cfg.eval.rrf_k == 60
        assert cfg.corpus_dir == cfg.out / "corpus"

    def test_seed_propagates_to_sections(self):
        cfg = build_run_config({"seed": 42})
        assert cfg.gen.seed == 42
        assert cfg.train.seed == 42


class TestValidation:
    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            build_run_config({"bogus": 1})

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="gen.*warp_speed"):
            build_run_config({"gen": {"warp_speed": 9}})

    def test_invalid_value_reported_with_section(self):
        with pytest.raises(ConfigError, match="train"):
            build_run_config({"train": {"epochs": 0}})

    def test_platform_parse(self):
        cfg = build_run_config({"gen": {"ground_platforms": ["cctv",
                                                             "wearable"]}})
        assert cfg.gen.ground_platforms == (Platform.CCTV, Platform.WEARABLE)

    def test_altitude_noise_parse(self):
        cfg = build_run_config(
            {"gen": {"altitudes": [15],
                     "altitude_noise": {"15": [0.9, 1.0, 0.02]}}})
        noise = cfg.gen.altitude_noise[15]
        assert noise.downscale == 0.9
        assert noise.blur_px == 1.0


class TestOverrides:
    def test_env_overrides_nested(self):
        doc = apply_env_overrides({}, {"AGVP_SEED": "7",
                                       "AGVP_GEN__NUM_IDENTITIES": "3",
                                       "AGVP_EVAL__METRIC": '"euclidean"'})
        cfg = build_run_config(doc)
        assert cfg.seed == 7
        assert cfg.gen.num_identities == 3
        assert cfg.eval.metric == "euclidean"

    def test_cli_beats_env_and_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": 1}))
        cfg = load_run_config(path, env={"AGVP_SEED": "2"},
                              cli_overrides={"seed": 3})
        assert cfg.seed == 3

    def test_env_beats_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": 1, "out": "somewhere"}))
        cfg = load_run_config(path, env={"AGVP_SEED": "2"})
        assert cfg.seed == 2
        assert str(cfg.out) == "somewhere"

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="not found"):
            load_run_config("nope.json", env={})

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_run_config(path, env={})


class TestEffectiveEcho:
    def test_effective_doc_round_trips(self):
        cfg = build_run_config({"seed": 5, "gen": {"num_identities": 3}})
        doc = cfg.effective
        again = build_run_config(doc)
        assert again.seed == 5
        assert again.gen.num_identities == 3
        assert again.effective == doc
