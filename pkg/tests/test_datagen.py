import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest

from agvp.core import AltitudeBucket, Platform
from agvp.datagen import (
    DatagenError,
    GenConfig,
    Manifest,
    ManifestError,
    ManifestRecord,
    SyntheticUVOracle,
    UnsupportedFrameError,
    generate_corpus,
    load_manifest,
    make_identities,
    surface_grid,
    view_vector,
    write_manifest,
)

SMALL = GenConfig(seed=7, num_identities=5, tracklets_per_identity_per_platform=2,
                  altitudes=(15, 120), frames_per_tracklet=5)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    manifest = generate_corpus(SMALL, out)
    return out, manifest


def tree_digest(root: Path) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


class TestGenConfig:
    def test_counts_validated(self):
        with pytest.raises(DatagenError):
            GenConfig(num_identities=0)
        with pytest.raises(DatagenError):
            GenConfig(clothing_change_prob=1.5)
        with pytest.raises(DatagenError):
            GenConfig(altitudes=(15, 45))

    def test_downscale_must_be_nonincreasing(self):
        from agvp.datagen import DEFAULT_ALTITUDE_NOISE, AltitudeNoise

        noise = dict(DEFAULT_ALTITUDE_NOISE)
        noise[120] = AltitudeNoise(0.9, 3.0, 0.06)  # larger than 80m's 0.35
        with pytest.raises(DatagenError):
            GenConfig(altitudes=(80, 120), altitude_noise=noise)


class TestGenerateCorpus:
    def test_tracklet_count_arithmetic(self, corpus):
        # 5 ids x 2 tracklets x ({CCTV} + {15, 120}) = 5 * 2 * 3
        _, manifest = corpus
        assert len(manifest) == 5 * 2 * 3

    def test_determinism_bit_identical(self, tmp_path):
        cfg = GenConfig(seed=3, num_identities=2,
                        tracklets_per_identity_per_platform=1,
                        altitudes=(15,), frames_per_tracklet=3)
        a, b = tmp_path / "a", tmp_path / "b"
        generate_corpus(cfg, a)
        generate_corpus(cfg, b)
        assert tree_digest(a) == tree_digest(b)

    def test_pixel_height_decreases_with_altitude(self, corpus):
        out, manifest = corpus
        meta = json.loads((out / "genmeta.json").read_text())["tracklets"]
        by_person = {}
        for rec in manifest.records:
            h = meta[rec.tracklet_id]["mean_pixel_height"]
            by_person.setdefault(rec.person_id, {}).setdefault(rec.altitude_m, []).append(h)
        for person, alts in by_person.items():
            assert np.mean(alts[120]) < np.mean(alts[15]), person

    def test_bbox_area_nonincreasing_in_altitude(self, corpus):
        out, manifest = corpus
        meta = json.loads((out / "genmeta.json").read_text())["tracklets"]
        by_person = {}
        for rec in manifest.records:
            if rec.platform != Platform.AERIAL.value:
                continue
            a = meta[rec.tracklet_id]["mean_bbox_area"]
            by_person.setdefault(rec.person_id, {}).setdefault(rec.altitude_m, []).append(a)
        for person, areas in by_person.items():
            ordered = [np.mean(areas[a]) for a in sorted(areas)]
            assert all(x >= y for x, y in zip(ordered, ordered[1:])), person

    def test_identities_have_distinct_textures(self):
        idents = make_identities(GenConfig(seed=1, num_identities=6))
        for i in range(len(idents)):
            for j in range(i + 1, len(idents)):
                per_texel = np.linalg.norm(idents[i].texture - idents[j].texture, axis=2)
                assert per_texel.min() > 0

    def test_clothing_change_swaps_garment_not_head(self, tmp_path):
        cfg = GenConfig(seed=11, num_identities=2,
                        tracklets_per_identity_per_platform=2,
                        altitudes=(), clothing_change_prob=1.0,
                        frames_per_tracklet=2)
        manifest = generate_corpus(cfg, tmp_path)
        clothing = {rec.session: rec.clothing_id for rec in manifest.records
                    if rec.person_id == "p000"}
        assert clothing == {"s0": "a", "s1": "b"}
        idents = make_identities(cfg)
        head = idents[0].texture[:6]
        head_alt = idents[0].texture_alt[:6]
        np.testing.assert_array_equal(head, head_alt)
        assert np.abs(idents[0].texture[30:40] - idents[0].texture_alt[30:40]).max() > 0.05


class TestSurfaceModel:
    def test_normals_are_unit(self):
        _, normals = surface_grid(32)
        np.testing.assert_allclose(np.linalg.norm(normals, axis=2), 1.0, atol=1e-12)

    def test_view_vector_is_unit(self):
        for e, a in [(0, 0), (35, 120), (75, 300)]:
            assert np.linalg.norm(view_vector(e, a)) == pytest.approx(1.0)


class TestOracle:
    def test_frontal_view_front_visible_back_hidden(self, corpus):
        out, _ = corpus
        oracle = SyntheticUVOracle(out)
        # frontal view: azimuth 0, ground elevation
        vis = np.clip(oracle.normals @ view_vector(0.0, 0.0), 0, 1)
        torso = vis[30:40]  # cylinder band rows
        assert torso[:, 0].min() > 0.95          # u=0 faces the camera
        back_col = oracle.uv_size // 2
        assert torso[:, back_col].max() == 0.0   # opposite side fully hidden

    def test_topdown_view_head_visible_torso_reduced(self, corpus):
        out, _ = corpus
        oracle = SyntheticUVOracle(out)
        elev = 75.0
        vis = np.clip(oracle.normals @ view_vector(elev, 0.0), 0, 1)
        # hand evaluation on the synthetic normals: the top cap row has
        # alpha = 0.95 * pi/2, so vis = sin(alpha)sin(e) + cos(alpha)cos(e)cos(theta)
        alpha = 0.95 * math.pi / 2
        e = math.radians(elev)
        expect_top = math.sin(alpha) * math.sin(e) + math.cos(alpha) * math.cos(e)
        assert vis[0, 0] == pytest.approx(expect_top, abs=1e-12)
        # torso front texel: vis = cos(e)
        assert vis[35, 0] == pytest.approx(math.cos(e), abs=1e-12)
        assert vis[0].mean() > vis[30:40].mean()

    def test_zero_sigma_returns_stored_texture_exactly(self, corpus):
        out, manifest = corpus
        oracle = SyntheticUVOracle(out)
        ground = next(t for t in manifest.to_tracklets()
                      if t.platform is Platform.CCTV)
        tex, vis = oracle.extract(ground.frames[0])
        from PIL import Image

        meta = json.loads((out / "genmeta.json").read_text())
        stored = np.asarray(Image.open(
            out / meta["tracklets"][ground.tracklet_id]["texture_file"]),
            dtype=np.float64) / 255.0
        assert meta["tracklets"][ground.tracklet_id]["noise_sigma"] == 0.0
        visible = vis > 0
        np.testing.assert_array_equal(tex[visible], stored[visible])
        assert np.all(tex[~visible] == 0.0)

    def test_aerial_noise_applied_to_visible_texels(self, corpus):
        out, manifest = corpus
        oracle = SyntheticUVOracle(out)
        high = next(t for t in manifest.to_tracklets() if t.altitude.value == 120)
        tex, vis = oracle.extract(high.frames[0])
        meta = json.loads((out / "genmeta.json").read_text())
        from PIL import Image

        stored = np.asarray(Image.open(
            out / meta["tracklets"][high.tracklet_id]["texture_file"]),
            dtype=np.float64) / 255.0
        visible = vis > 0
        assert np.abs(tex[visible] - stored[visible]).max() > 0
        # deterministic per frame
        tex2, _ = oracle.extract(high.frames[0])
        np.testing.assert_array_equal(tex, tex2)

    def test_unknown_frame_rejected(self, corpus):
        out, _ = corpus
        oracle = SyntheticUVOracle(out)
        with pytest.raises(UnsupportedFrameError):
            oracle.extract("/elsewhere/frames/nope/000000.png")


class TestManifestIO:
    def test_empty_manifest_round_trip(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        write_manifest(Manifest(records=[]), path)
        loaded = load_manifest(path)
        assert loaded.records == []

    def test_generated_corpus_round_trips(self, corpus, tmp_path):
        out, manifest = corpus
        loaded = load_manifest(out / "manifest.jsonl")
        assert loaded.records == manifest.records
        assert loaded.attributes == manifest.attributes

    def test_missing_person_id_names_line(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        good = ManifestRecord("t0", "p0", "c0", "cctv", 0, "s0", "a", ("f.png",))
        bad = json.loads(good.to_json())
        del bad["person_id"]
        path.write_text(good.to_json() + "\n" + json.dumps(bad) + "\n")
        (tmp_path / "f.png").touch()
        with pytest.raises(ManifestError, match="line 2"):
            load_manifest(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        rec = json.loads(ManifestRecord("t0", "p0", "c0", "cctv", 0, "s0", "a",
                                        ("f.png",)).to_json())
        rec["extra"] = 1
        path.write_text(json.dumps(rec) + "\n")
        (tmp_path / "f.png").touch()
        with pytest.raises(ManifestError, match="line 1.*extra"):
            load_manifest(path)

    def test_missing_frame_file_rejected(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        rec = ManifestRecord("t0", "p0", "c0", "cctv", 0, "s0", "a", ("gone.png",))
        path.write_text(rec.to_json() + "\n")
        with pytest.raises(ManifestError, match="line 1"):
            load_manifest(path)
        # but loads when existence checks are disabled
        assert len(load_manifest(path, check_frames=False).records) == 1

    def test_inconsistent_platform_altitude_rejected(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        rec = ManifestRecord("t0", "p0", "c0", "cctv", 15, "s0", "a", ("f.png",))
        path.write_text(rec.to_json() + "\n")
        (tmp_path / "f.png").touch()
        loaded = load_manifest(path)  # record-level fields parse fine
        with pytest.raises(Exception):
            loaded.to_tracklets()

    def test_attributes_round_trip(self, tmp_path):
        cfg = GenConfig(seed=5, num_identities=2, altitudes=(),
                        tracklets_per_identity_per_platform=1,
                        frames_per_tracklet=2, with_attributes=True)
        manifest = generate_corpus(cfg, tmp_path)
        assert manifest.attributes is not None
        loaded = load_manifest(tmp_path / "manifest.jsonl")
        assert loaded.attributes == manifest.attributes
