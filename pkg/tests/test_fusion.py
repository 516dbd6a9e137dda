import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from agvp.fusion import (
    FeatureFusion,
    FusionError,
    RankedList,
    fuse_features,
    read_rank_lists,
    rrf,
    write_rank_lists,
)


def ranked(query, ordered_ids, scores=None):
    if scores is None:
        scores = [float(len(ordered_ids) - i) for i in range(len(ordered_ids))]
    return RankedList(query, tuple(zip(ordered_ids, scores)))


def lists_with_ranks(gallery, rank_maps):
    """Build three rank lists given each stream's rank per gallery id."""
    out = []
    for ranks in rank_maps:
        ordered = sorted(gallery, key=lambda g: (ranks[g], g))
        out.append(ranked("q", ordered))
    return out


class TestRankedList:
    def test_duplicate_gallery_id_rejected(self):
        with pytest.raises(FusionError):
            RankedList("q", (("g1", 2.0), ("g1", 1.0)))

    def test_out_of_order_rejected(self):
        with pytest.raises(FusionError):
            RankedList("q", (("g1", 1.0), ("g2", 2.0)))

    def test_tie_breaks_by_ascending_id(self):
        rl = RankedList.from_scores("q", {"b": 1.0, "a": 1.0, "c": 2.0})
        assert rl.gallery_ids() == ["c", "a", "b"]


class TestRRF:
    def test_unanimous_first_place_score(self):
        # three rank-1 votes: 3 / (60 + 1)
        gallery = ["g1", "g2"]
        lists = lists_with_ranks(gallery, [{"g1": 1, "g2": 2}] * 3)
        fused = rrf(lists)
        assert fused.entries[0][0] == "g1"
        assert fused.entries[0][1] == pytest.approx(3 / 61, abs=1e-12)

    def test_mixed_ranks_score(self):
        # ranks (1, 2, 3): 1/61 + 1/62 + 1/63
        gallery = ["a", "b", "c"]
        lists = lists_with_ranks(gallery, [
            {"a": 1, "b": 2, "c": 3},
            {"a": 2, "b": 1, "c": 3},
            {"a": 3, "b": 2, "c": 1},
        ])
        fused = rrf(lists)
        score_a = dict(fused.entries)["a"]
        assert score_a == pytest.approx(1 / 61 + 1 / 62 + 1 / 63, abs=1e-12)

    def test_input_order_irrelevant(self):
        gallery = [f"g{i}" for i in range(6)]
        rng = np.random.default_rng(0)
        rank_maps = []
        for _ in range(3):
            perm = rng.permutation(len(gallery))
            rank_maps.append({g: int(p) + 1 for g, p in zip(gallery, perm)})
        base = rrf(lists_with_ranks(gallery, rank_maps))
        for order in itertools.permutations(range(3)):
            again = rrf([lists_with_ranks(gallery, rank_maps)[i] for i in order])
            assert again.entries == base.entries

    def test_improving_one_rank_strictly_increases_score(self):
        gallery = ["a", "b", "c", "d"]
        before = lists_with_ranks(gallery, [
            {"a": 2, "b": 1, "c": 3, "d": 4},
            {"a": 2, "b": 1, "c": 3, "d": 4},
            {"a": 2, "b": 1, "c": 3, "d": 4},
        ])
        after = lists_with_ranks(gallery, [
            {"a": 1, "b": 2, "c": 3, "d": 4},   # a moves up by one in stream 1
            {"a": 2, "b": 1, "c": 3, "d": 4},
            {"a": 2, "b": 1, "c": 3, "d": 4},
        ])
        s_before = dict(rrf(before).entries)["a"]
        s_after = dict(rrf(after).entries)["a"]
        assert s_after > s_before

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 50))
    def test_matches_brute_force_oracle(self, seed, gallery_size):
        rng = np.random.default_rng(seed)
        gallery = [f"g{i:02d}" for i in range(gallery_size)]
        rank_maps = []
        for _ in range(3):
            perm = rng.permutation(gallery_size)
            rank_maps.append({g: int(p) + 1 for g, p in zip(gallery, perm)})
        fused = rrf(lists_with_ranks(gallery, rank_maps))
        # independent direct evaluation of the fusion formula
        expect = {g: sum(1.0 / (60 + rm[g]) for rm in rank_maps) for g in gallery}
        ordered = sorted(gallery, key=lambda g: (-expect[g], g))
        assert fused.gallery_ids() == ordered
        for g, s in fused.entries:
            assert s == pytest.approx(expect[g], abs=1e-12)
        # score bounds: 3/(k+G) <= score <= 3/(k+1)
        scores = [s for _, s in fused.entries]
        assert min(scores) >= 3 / (60 + gallery_size) - 1e-12
        assert max(scores) <= 3 / 61 + 1e-12

    def test_gallery_mismatch_rejected(self):
        a = ranked("q", ["g1", "g2"])
        b = ranked("q", ["g1", "g3"])
        with pytest.raises(FusionError):
            rrf([a, b, a])

    def test_mixed_queries_rejected(self):
        a = ranked("q1", ["g1", "g2"])
        b = ranked("q2", ["g1", "g2"])
        with pytest.raises(FusionError):
            rrf([a, b])


class TestFeatureFusion:
    def make(self, seed=0):
        torch.manual_seed(seed)
        return FeatureFusion(in_dims=(6, 10, 4), fused_dim=8).double()

    def embeddings(self, seed=1):
        gen = torch.Generator().manual_seed(seed)
        return (torch.randn(6, generator=gen, dtype=torch.float64),
                torch.randn(10, generator=gen, dtype=torch.float64),
                torch.randn(4, generator=gen, dtype=torch.float64))

    def test_degenerate_weights_select_one_stream(self):
        fusion = self.make()
        with torch.no_grad():
            fusion.logits.copy_(torch.tensor([60.0, 0.0, 0.0]))
        f_t, f_a, f_m = self.embeddings()
        out = fuse_features(f_t, f_a, f_m, fusion)
        expect = FeatureFusion._unit(fusion.projections[0](f_t))
        assert torch.allclose(out, expect, atol=1e-12)

    def test_equal_logits_give_arithmetic_mean(self):
        fusion = self.make()
        f_t, f_a, f_m = self.embeddings()
        out = fuse_features(f_t, f_a, f_m, fusion)
        parts = [FeatureFusion._unit(p(f))
                 for p, f in zip(fusion.projections, (f_t, f_a, f_m))]
        assert torch.allclose(out, sum(parts) / 3, atol=1e-12)

    def test_norm_bounded_by_one(self):
        fusion = self.make()
        with torch.no_grad():
            fusion.logits.copy_(torch.tensor([0.3, -1.2, 0.8]))
        f_t, f_a, f_m = self.embeddings(seed=5)
        out = fuse_features(f_t, f_a, f_m, fusion)
        assert out.norm().item() <= 1.0 + 1e-12

    def test_weights_on_simplex(self):
        fusion = self.make()
        with torch.no_grad():
            fusion.logits.copy_(torch.tensor([2.0, -3.0, 0.5]))
        w = fusion.weights()
        assert abs(w.sum().item() - 1.0) <= 1e-9
        assert (w >= 0).all()

    def test_softmax_shift_invariance_exact(self):
        fusion = self.make()
        base = torch.tensor([0.5, -0.25, 0.125], dtype=torch.float64)
        with torch.no_grad():
            fusion.logits.copy_(base)
        w1 = fusion.weights()
        with torch.no_grad():
            fusion.logits.copy_(base + 2.0)   # dyadic shift, exact in fp
        w2 = fusion.weights()
        assert torch.equal(w1, w2)

    def test_dim_mismatch_rejected(self):
        fusion = self.make()
        f_t, f_a, f_m = self.embeddings()
        with pytest.raises(FusionError):
            fuse_features(f_a, f_t, f_m, fusion)

    def test_gradients_match_finite_differences(self):
        import sys
        sys.path.insert(0, "tests")
        from fdcheck import assert_grads_match, scalarize

        fusion = self.make(seed=7)
        f_t, f_a, f_m = self.embeddings(seed=8)
        for f in (f_t, f_a, f_m):
            f.requires_grad_(True)
        params = list(fusion.parameters()) + [f_t, f_a, f_m]
        assert_grads_match(
            lambda: scalarize(fuse_features(f_t, f_a, f_m, fusion)), params)


class TestRankListCSV:
    def test_round_trip(self, tmp_path):
        lists = [
            RankedList.from_scores("q1", {"a": 0.3, "b": 0.9, "c": 0.3}),
            RankedList.from_scores("q2", {"a": 1.0, "b": 0.1, "c": 0.5}),
        ]
        path = tmp_path / "stream1.csv"
        write_rank_lists(lists, path)
        loaded = read_rank_lists(path)
        assert loaded == lists

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("nope\n")
        with pytest.raises(FusionError):
            read_rank_lists(path)
