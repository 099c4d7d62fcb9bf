import json

import numpy as np
import pytest

from skelid.matching import (
    EmbeddingEntry,
    EmbeddingSet,
    MatchOptions,
    RankMatrix,
    aggregate_nn,
    borda_vote,
    build_rank_matrix,
    dowdall_vote,
    k_reciprocal_rerank,
    match_video,
    pairwise_distances,
    read_embeddings,
    segment_id_ranks,
    vote_on_ranks,
    write_distance_csv,
    write_embeddings,
)


def entry(seg_id, vec, video=None, person="p", camera="c", clothes="k"):
    return EmbeddingEntry(
        segment_id=seg_id,
        video_id=video if video is not None else seg_id.split("#")[0],
        person_id=person,
        camera_id=camera,
        clothes_id=clothes,
        vector=np.asarray(vec, dtype=np.float64),
    )


def unit(angle_deg):
    a = np.deg2rad(angle_deg)
    return np.array([np.cos(a), np.sin(a)])


def gallery_from(vectors, person_ids):
    return EmbeddingSet(
        [
            entry(f"g{i}#00000", v, person=pid)
            for i, (v, pid) in enumerate(zip(vectors, person_ids))
        ]
    )


class TestEmbeddingSet:
    def test_uniform_dim_enforced(self):
        with pytest.raises(ValueError):
            EmbeddingSet([entry("a#00000", [1.0, 2.0]), entry("b#00000", [1.0])])

    def test_unique_ids_enforced(self):
        with pytest.raises(ValueError):
            EmbeddingSet([entry("a#00000", [1.0]), entry("a#00000", [2.0])])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            entry("a#00000", [np.nan, 1.0])

    def test_vectors_matrix(self):
        es = EmbeddingSet([entry("a#00000", [1.0, 2.0]), entry("b#00000", [3.0, 4.0])])
        np.testing.assert_array_equal(es.vectors, [[1.0, 2.0], [3.0, 4.0]])
        assert es.dim == 2

    def test_by_video_groups_in_order(self):
        es = EmbeddingSet(
            [
                entry("v1#00000", [1.0], video="v1"),
                entry("v2#00000", [2.0], video="v2"),
                entry("v1#00025", [3.0], video="v1"),
            ]
        )
        groups = es.by_video()
        assert list(groups) == ["v1", "v2"]
        assert groups["v1"].segment_ids == ["v1#00000", "v1#00025"]

    def test_jsonl_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        es = EmbeddingSet(
            [entry(f"v{i}#00000", rng.normal(size=5), person=f"p{i}") for i in range(4)]
        )
        path = tmp_path / "emb.jsonl"
        write_embeddings(es, path)
        again = read_embeddings(path)
        assert again.segment_ids == es.segment_ids
        assert again.person_ids == es.person_ids
        np.testing.assert_array_equal(again.vectors, es.vectors)

    def test_read_rejects_bad_line(self, tmp_path):
        path = tmp_path / "emb.jsonl"
        path.write_text("{broken\n")
        with pytest.raises(ValueError, match="line 1"):
            read_embeddings(path)

    def test_read_rejects_missing_key(self, tmp_path):
        path = tmp_path / "emb.jsonl"
        path.write_text(json.dumps({"segment_id": "a", "vector": [1.0]}) + "\n")
        with pytest.raises(ValueError, match="missing key"):
            read_embeddings(path)


class TestPairwise:
    def test_matching_vector_is_zero(self):
        q = EmbeddingSet([entry("q#00000", [1.0, 2.0])])
        g = EmbeddingSet([entry("g#00000", [1.0, 2.0]), entry("h#00000", [0.0, 1.0])])
        d = pairwise_distances(q, g)
        assert d[0, 0] == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal_pair(self):
        d = pairwise_distances(np.array([[1.0, 0.0]]), np.array([[0.0, 3.0]]))
        np.testing.assert_allclose(d, [[1.0]])

    def test_matches_double_loop(self):
        rng = np.random.default_rng(1)
        q = rng.normal(size=(2, 4))
        g = rng.normal(size=(3, 4))
        d = pairwise_distances(q, g)
        for i in range(2):
            for j in range(3):
                expect = 1.0 - q[i] @ g[j] / (np.linalg.norm(q[i]) * np.linalg.norm(g[j]))
                assert abs(d[i, j] - expect) < 1e-12

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            pairwise_distances(np.ones((2, 3)), np.ones((2, 4)))

    def test_csv_export(self, tmp_path):
        d = np.array([[0.25, 0.5]])
        path = tmp_path / "d.csv"
        write_distance_csv(d, ["q#00000"], ["g1#00000", "g2#00000"], path)
        lines = path.read_text().splitlines()
        assert lines[0] == "segment_id,g1#00000,g2#00000"
        assert lines[1] == "q#00000,0.25,0.5"


class TestRerank:
    def test_lambda_one_is_exact(self):
        rng = np.random.default_rng(2)
        q = rng.normal(size=(3, 8))
        g = rng.normal(size=(7, 8))
        orig = pairwise_distances(q, g)
        out = k_reciprocal_rerank(q, g, k1=3, k2=2, lam=1.0)
        np.testing.assert_array_equal(out, orig)

    def test_validation(self):
        q, g = np.ones((2, 3)), np.ones((4, 3))
        with pytest.raises(ValueError):
            k_reciprocal_rerank(q, g, k1=2, k2=3)
        with pytest.raises(ValueError):
            k_reciprocal_rerank(q, g, k1=3, k2=1, lam=1.5)
        with pytest.raises(ValueError):
            k_reciprocal_rerank(np.ones((0, 3)), g)

    def test_clamp_warns(self):
        rng = np.random.default_rng(3)
        q = rng.normal(size=(2, 4))
        g = rng.normal(size=(3, 4))
        with pytest.warns(UserWarning, match="clamp"):
            k_reciprocal_rerank(q, g, k1=50, k2=6)

    def test_two_clusters_separate(self):
        rng = np.random.default_rng(4)
        base_a = np.array([1.0, 0.0, 0.0, 0.0])
        base_b = np.array([0.0, 1.0, 0.0, 0.0])
        cluster_a = base_a + 0.01 * rng.normal(size=(4, 4))
        cluster_b = base_b + 0.01 * rng.normal(size=(4, 4))
        q = np.vstack([cluster_a[:2], cluster_b[:2]])
        g = np.vstack([cluster_a[2:], cluster_b[2:]])
        out = k_reciprocal_rerank(q, g, k1=3, k2=2, lam=0.3)
        # queries 0,1 belong to cluster a (gallery cols 0,1), 2,3 to b
        for qi, own in ((0, [0, 1]), (1, [0, 1]), (2, [2, 3]), (3, [2, 3])):
            other = [c for c in range(4) if c not in own]
            assert out[qi, own].max() < out[qi, other].min()

    def test_reciprocal_cluster_beats_equal_distance(self):
        # gallery point a sits in a mutual cluster with the query; c is at
        # the same original distance but its own neighbors exclude the query
        q = EmbeddingSet([entry("q#00000", unit(0))])
        a = unit(5)
        c = np.array([a[0], -a[1]])  # exact mirror: identical distance to q
        gallery = gallery_from(
            [a, c, unit(3), unit(-5.3), unit(-5.6), unit(-5.9)],
            ["a", "c", "b", "e", "f", "g"],
        )
        orig = pairwise_distances(q, gallery)
        assert orig[0, 0] == orig[0, 1]
        out = k_reciprocal_rerank(q, gallery, k1=3, k2=2, lam=0.3)
        assert out[0, 0] < out[0, 1]

    def test_output_shape_and_finite(self):
        rng = np.random.default_rng(5)
        q = rng.normal(size=(4, 6))
        g = rng.normal(size=(9, 6))
        out = k_reciprocal_rerank(q, g, k1=4, k2=2, lam=0.3)
        assert out.shape == (4, 9)
        assert np.isfinite(out).all()


class TestSegmentIdRanks:
    def test_min_aggregation(self):
        ids, ranks = segment_id_ranks(
            np.array([0.2, 0.9, 0.5]), ["A", "A", "B"]
        )
        assert ids == ("A", "B")
        np.testing.assert_array_equal(ranks, [1, 2])

    def test_all_equal_label_order(self):
        ids, ranks = segment_id_ranks(np.full(3, 0.7), ["C", "A", "B"])
        assert ids == ("A", "B", "C")
        np.testing.assert_array_equal(ranks, [1, 2, 3])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(6)
        labels = ["A", "B", "C"] * 3
        for _ in range(50):
            row = rng.uniform(size=9)
            ids, ranks = segment_id_ranks(row, labels)
            best = {pid: min(row[i] for i in range(9) if labels[i] == pid) for pid in ids}
            expect_order = sorted(ids, key=lambda pid: (best[pid], pid))
            got_order = [pid for pid, _ in sorted(zip(ids, ranks), key=lambda t: t[1])]
            assert got_order == expect_order

    def test_scale_invariance(self):
        rng = np.random.default_rng(7)
        row = rng.uniform(size=6)
        labels = ["A", "A", "B", "B", "C", "C"]
        _, r1 = segment_id_ranks(row, labels)
        _, r2 = segment_id_ranks(row * 37.5, labels)
        np.testing.assert_array_equal(r1, r2)


class TestRankMatrix:
    def test_rows_validated(self):
        with pytest.raises(ValueError):
            RankMatrix(identities=("A", "B"), ranks=np.array([[1, 1]]))

    def test_build_from_distances(self):
        dist = np.array([[0.1, 0.2, 0.3], [0.3, 0.2, 0.1]])
        rm = build_rank_matrix(dist, ["A", "B", "C"])
        np.testing.assert_array_equal(rm.ranks, [[1, 2, 3], [3, 2, 1]])

    def test_argmax_invariance_under_scaling(self):
        rng = np.random.default_rng(8)
        dist = rng.uniform(size=(4, 6))
        labels = ["A", "B", "C"] * 2
        rm1 = build_rank_matrix(dist, labels)
        rm2 = build_rank_matrix(dist * 12.25, labels)
        np.testing.assert_array_equal(rm1.ranks, rm2.ranks)


class TestDowdall:
    def test_single_segment_scores(self):
        rm = RankMatrix(identities=("A", "B", "C"), ranks=np.array([[1, 2, 3]]))
        res = dowdall_vote(rm)
        np.testing.assert_allclose(res.scores, [1.0, 0.5, 1.0 / 3.0])
        assert res.order == ("A", "B", "C")

    def test_symmetric_tie_break(self):
        rm = RankMatrix(identities=("A", "B"), ranks=np.array([[1, 2], [2, 1]]))
        res = dowdall_vote(rm)
        np.testing.assert_allclose(res.scores, [1.5, 1.5])
        assert res.order == ("A", "B")  # equal score, equal best rank, label order

    def test_matches_brute_force(self):
        rng = np.random.default_rng(9)
        ids = tuple("ABCDE")
        for _ in range(30):
            ranks = np.stack([rng.permutation(5) + 1 for _ in range(3)])
            res = dowdall_vote(RankMatrix(identities=ids, ranks=ranks))
            expect = [sum(1.0 / ranks[i, j] for i in range(3)) for j in range(5)]
            np.testing.assert_allclose(res.scores, expect)

    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(10)
        ranks = np.stack([rng.permutation(4) + 1 for _ in range(5)])
        rm = RankMatrix(identities=tuple("ABCD"), ranks=ranks)
        shuffled = RankMatrix(identities=tuple("ABCD"), ranks=ranks[::-1].copy())
        a, b = dowdall_vote(rm), dowdall_vote(shuffled)
        np.testing.assert_allclose(a.scores, b.scores)
        assert a.order == b.order

    def test_single_segment_order_equals_rank_row(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            ranks = (rng.permutation(6) + 1)[None, :]
            rm = RankMatrix(identities=tuple("ABCDEF"), ranks=ranks)
            res = dowdall_vote(rm)
            by_rank = [rm.identities[j] for j in np.argsort(ranks[0])]
            assert list(res.order) == by_rank

    def test_order_is_total(self):
        rng = np.random.default_rng(12)
        ranks = np.stack([rng.permutation(5) + 1 for _ in range(4)])
        res = dowdall_vote(RankMatrix(identities=tuple("ABCDE"), ranks=ranks))
        assert sorted(res.order) == sorted(res.identities)


class TestBorda:
    def test_weights(self):
        rm = RankMatrix(identities=("A", "B", "C"), ranks=np.array([[1, 2, 3]]))
        res = borda_vote(rm, k=3)
        np.testing.assert_allclose(res.scores, [2.0, 1.0, 0.0])

    def test_k_one_pure_tie_break(self):
        rm = RankMatrix(identities=("B", "A"), ranks=np.array([[2, 1]]))
        res = borda_vote(rm, k=1)
        np.testing.assert_allclose(res.scores, [0.0, 0.0])
        assert res.order == ("A", "B")  # best rank wins, then labels

    def test_matches_brute_force(self):
        rng = np.random.default_rng(13)
        ids = tuple("ABCD")
        for _ in range(30):
            ranks = np.stack([rng.permutation(4) + 1 for _ in range(3)])
            k = int(rng.integers(1, 6))
            res = borda_vote(RankMatrix(identities=ids, ranks=ranks), k=k)
            expect = [
                sum(max(k - ranks[i, j], 0) for i in range(3)) for j in range(4)
            ]
            np.testing.assert_allclose(res.scores, expect)

    def test_k_validated(self):
        rm = RankMatrix(identities=("A",), ranks=np.array([[1]]))
        with pytest.raises(ValueError):
            borda_vote(rm, k=0)


class TestMatchVideo:
    def nn_opts(self, **over):
        base = dict(rerank=False, vote="none")
        base.update(over)
        return MatchOptions(**base)

    def test_single_segment_nn_is_sorted_row(self):
        q = EmbeddingSet([entry("q#00000", unit(0))])
        vecs = [unit(50), unit(10), unit(30), unit(70)]
        gallery = gallery_from(vecs, ["A", "B", "A", "C"])
        res = match_video(q, gallery, self.nn_opts())
        dist = pairwise_distances(q, gallery)[0]
        expect = [gallery.segment_ids[i] for i in np.argsort(dist, kind="stable")]
        assert list(res.sample_order) == expect
        assert res.order[0] == "B"

    def test_dowdall_two_segment_example(self):
        q = EmbeddingSet([entry("q#00000", unit(0)), entry("q#00025", unit(90))])
        gallery = gallery_from([unit(0), unit(45), unit(90)], ["A", "B", "C"])
        res = match_video(q, gallery, MatchOptions(rerank=False, vote="dowdall"))
        # segment 1 ranks A,B,C; segment 2 ranks C,B,A
        assert res.score_of("A") == pytest.approx(1 + 1 / 3)
        assert res.score_of("B") == pytest.approx(1.0)
        assert res.score_of("A") > res.score_of("B")
        assert res.order[0] == "A"  # ties with C break to the earlier label

    def test_revoting_fixes_corrupted_segment(self):
        # two of three segments agree on A; the third is corrupted and
        # sits nearer B than either A segment sits to anything
        q = EmbeddingSet(
            [
                entry("q#00000", unit(10)),
                entry("q#00025", unit(88)),
                entry("q#00050", unit(14)),
            ]
        )
        gallery = gallery_from([unit(20), unit(4), unit(90)], ["A", "A", "B"])
        nn = match_video(q, gallery, self.nn_opts())
        rv = match_video(q, gallery, MatchOptions(rerank=False, vote="dowdall"))
        assert nn.order[0] == "B"  # nearest single distance wins and is wrong
        assert rv.order[0] == "A"  # majority of segments outvotes it

    def test_voted_sample_order_groups_by_identity(self):
        q = EmbeddingSet([entry("q#00000", unit(0)), entry("q#00025", unit(2))])
        gallery = gallery_from(
            [unit(5), unit(80), unit(8), unit(40)], ["A", "A", "B", "B"]
        )
        res = match_video(q, gallery, MatchOptions(rerank=False, vote="dowdall"))
        ids_in_order = [gallery.person_ids[gallery.segment_ids.index(s)] for s in res.sample_order]
        # all of the winning identity's segments precede the loser's
        assert ids_in_order == sorted(ids_in_order, key=lambda p: res.order.index(p))

    def test_nn_multi_segment_uses_min(self):
        q = EmbeddingSet([entry("q#00000", unit(0)), entry("q#00025", unit(60))])
        gallery = gallery_from([unit(58), unit(10)], ["A", "B"])
        res = match_video(q, gallery, self.nn_opts())
        # A is nearest to segment 2, B nearest to segment 1; A wins on min
        d = pairwise_distances(q, gallery)
        assert d.min(axis=0)[0] < d.min(axis=0)[1]
        assert res.order[0] == "A"

    def test_empty_gallery_rejected(self):
        q = EmbeddingSet([entry("q#00000", [1.0, 0.0])])
        with pytest.raises(ValueError):
            match_video(q, EmbeddingSet([]), self.nn_opts())

    def test_empty_query_rejected(self):
        g = gallery_from([[1.0, 0.0]], ["A"])
        with pytest.raises(ValueError):
            match_video(EmbeddingSet([]), g, self.nn_opts())

    def test_rerank_path_runs(self):
        rng = np.random.default_rng(14)
        q = EmbeddingSet(
            [entry(f"q#{i:05d}", rng.normal(size=4)) for i in range(3)]
        )
        gallery = gallery_from(
            rng.normal(size=(8, 4)), ["A", "A", "B", "B", "C", "C", "D", "D"]
        )
        res = match_video(q, gallery, MatchOptions(rerank=True, vote="dowdall", k1=4, k2=2))
        assert sorted(res.order) == ["A", "B", "C", "D"]
        assert len(res.sample_order) == 8

    def test_borda_path(self):
        q = EmbeddingSet([entry("q#00000", unit(0))])
        gallery = gallery_from([unit(10), unit(40), unit(70)], ["A", "B", "C"])
        res = match_video(q, gallery, MatchOptions(rerank=False, vote="borda"))
        np.testing.assert_allclose(res.scores, [2.0, 1.0, 0.0])

    def test_options_validated(self):
        with pytest.raises(ValueError):
            MatchOptions(vote="plurality")
        with pytest.raises(ValueError):
            MatchOptions(k1=2, k2=5)
        with pytest.raises(ValueError):
            MatchOptions(lam=-0.1)


class TestAggregateNn:
    def test_scores_are_negated_min_distance(self):
        dist = np.array([[0.4, 0.1], [0.2, 0.9]])
        res = aggregate_nn(dist, ["A", "B"])
        np.testing.assert_allclose(res.scores, [-0.2, -0.1])
        assert res.order == ("B", "A")

    def test_vote_on_ranks_rejects_none(self):
        rm = RankMatrix(identities=("A", "B"), ranks=np.array([[1, 2]]))
        with pytest.raises(ValueError):
            vote_on_ranks(rm, MatchOptions(vote="none"))
