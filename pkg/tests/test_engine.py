import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reir.engine import (
    DanglingReferenceError,
    DuplicateInstanceError,
    EvalSpec,
    InstanceRecord,
    QueryRecord,
    build_index,
    build_index_arrays,
    evaluate_benchmark,
    rank_query,
)
from reir.metrics import (
    Box,
    GroundTruth,
    RankedCandidate,
    box_recall_at_k,
    image_ranking,
    iou,
    recall_at_k,
)
from reir.numerics import DimensionError, make_rng


def random_gallery(seed, n_images=50, max_inst=8, dim=6):
    rng = make_rng(seed)
    records = []
    for img in range(n_images):
        for inst in range(int(rng.integers(1, max_inst + 1))):
            gt = Box(*rng.uniform(0, 1, 2), *rng.uniform(0.2, 1.0, 2))
            jitter = rng.normal(scale=0.1, size=4)
            pred = Box(gt.x + jitter[0], gt.y + jitter[1], gt.w * np.exp(jitter[2]), gt.h * np.exp(jitter[3]))
            records.append(InstanceRecord(img * 3 + 1, inst, rng.normal(size=dim), pred, gt))
    return records


def random_queries(seed, index, n=40, dim=6):
    rng = make_rng(seed)
    out = []
    for q in range(n):
        r = int(rng.integers(0, len(index)))
        rec = index.record(r)
        emb = rec.feature + rng.normal(scale=0.8, size=dim)
        out.append(QueryRecord(q, emb, rec.image_id, rec.instance_id, rec.gt_box))
    return out


def brute_force(records, queries, spec):
    """Every (query, candidate) pair scored and sorted in plain Python."""
    flat = {(r.image_id, r.instance_id): np.asarray(r.feature, dtype=np.float32).astype(np.float64) for r in records}
    pred = {(r.image_id, r.instance_id): Box.from_seq(np.asarray(r.box.as_list(), dtype=np.float32)) for r in records}
    rankings, gts, prec = [], [], {t: 0 for t in spec.taus}
    for q in queries:
        cands = [
            RankedCandidate(img, inst, float(np.dot(f, q.embedding)), pred[(img, inst)])
            for (img, inst), f in flat.items()
        ]
        cands.sort(key=lambda c: (-c.score, c.image_id, c.instance_id))
        rankings.append(cands)
        gt_box = Box.from_seq(np.asarray(q.gt_box.as_list(), dtype=np.float32))
        gts.append(GroundTruth(q.gt_image_id, q.gt_instance_id, gt_box))
        best_in_image = next(c for c in cands if c.image_id == q.gt_image_id)
        for t in spec.taus:
            prec[t] += iou(best_in_image.predicted_box, gt_box) > t
    n = len(queries)
    images = [image_ranking(r) for r in rankings]
    return {
        "recall": {k: recall_at_k(images, [q.gt_image_id for q in queries], k) for k in spec.ks},
        "box": {
            (k, t): box_recall_at_k(rankings, gts, k, t, spec.identity_mode) for k in spec.ks for t in spec.taus
        },
        "prec": {t: prec[t] / n for t in spec.taus},
    }


class TestBuild:
    def test_counts(self):
        recs = [InstanceRecord(i, j, np.ones(3), Box(0, 0, 1, 1)) for i in range(3) for j in range(2)]
        idx = build_index(recs)
        assert idx.flat.shape == (6, 3) and idx.n_images == 3

    def test_empty(self):
        idx = build_index([])
        assert len(idx) == 0
        with pytest.raises(ValueError):
            evaluate_benchmark(idx, [QueryRecord(0, np.zeros(0), 0, 0, Box(0, 0, 1, 1))])

    def test_shuffle_same_checksum(self):
        recs = random_gallery(0, n_images=10)
        a = build_index(recs)
        b = build_index([recs[i] for i in make_rng(1).permutation(len(recs))])
        assert a.checksum == b.checksum
        np.testing.assert_array_equal(a.flat, b.flat)

    def test_duplicate_named(self):
        recs = [InstanceRecord(4, 2, np.ones(3), Box(0, 0, 1, 1))] * 2
        with pytest.raises(DuplicateInstanceError, match="image_id=4, instance_id=2"):
            build_index(recs)
        with pytest.raises(DuplicateInstanceError, match="image_id=4, instance_id=2"):
            build_index_arrays([4, 4], [2, 2], np.ones((2, 3)), np.ones((2, 4)))

    def test_dimension_mismatch(self):
        recs = [InstanceRecord(0, 0, np.ones(3), Box(0, 0, 1, 1)), InstanceRecord(0, 1, np.ones(2), Box(0, 0, 1, 1))]
        with pytest.raises(DimensionError):
            build_index(recs)

    def test_array_builder_matches_records(self):
        recs = random_gallery(2, n_images=6)
        a = build_index(recs)
        b = build_index_arrays(
            [r.image_id for r in recs],
            [r.instance_id for r in recs],
            [r.feature for r in recs],
            [r.box.as_list() for r in recs],
            [r.gt_box.as_list() for r in recs],
        )
        assert a.checksum == b.checksum

    def test_immutable(self):
        idx = build_index(random_gallery(0, n_images=2))
        with pytest.raises(ValueError):
            idx.flat[0, 0] = 1.0


class TestRank:
    def test_single(self):
        idx = build_index([InstanceRecord(5, 1, np.array([1.0, 0.0]), Box(0, 0, 1, 1))])
        for k in (1, 3, 10):
            assert [(c.image_id, c.instance_id) for c in rank_query(idx, [0.3, 0.2], k)] == [(5, 1)]

    def test_orthogonal_query_uses_id_order(self):
        recs = [InstanceRecord(i, j, np.array([1.0, 0.0]), Box(0, 0, 1, 1)) for i in (3, 1, 2) for j in (1, 0)]
        ranked = rank_query(build_index(recs), [0.0, 1.0], 6)
        assert all(c.score == 0.0 for c in ranked)
        assert [(c.image_id, c.instance_id) for c in ranked] == [(1, 0), (1, 1), (2, 0), (2, 1), (3, 0), (3, 1)]

    @pytest.mark.parametrize("seed", range(3))
    def test_full_sort_oracle(self, seed):
        recs = random_gallery(seed, n_images=40, max_inst=5)[:200]
        idx = build_index(recs)
        T = make_rng(seed + 9).normal(size=6)
        scored = [
            (-float(np.float32(r.feature).astype(np.float64) @ T), r.image_id, r.instance_id) for r in recs
        ]
        expected = [(i, j) for _, i, j in sorted(scored)]
        got = [(c.image_id, c.instance_id) for c in rank_query(idx, T, len(recs))]
        assert got == expected

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 30), st.integers(0, 30), st.floats(1e-3, 1e3))
    def test_prefix_and_scale(self, seed, k1, extra, c):
        idx = build_index(random_gallery(seed % 50, n_images=6))
        T = make_rng(seed).normal(size=6)
        short = [(r.image_id, r.instance_id) for r in rank_query(idx, T, k1)]
        long = [(r.image_id, r.instance_id) for r in rank_query(idx, T, k1 + extra)]
        assert long[: len(short)] == short
        scaled = [(r.image_id, r.instance_id) for r in rank_query(idx, c * T, k1 + extra)]
        assert scaled == long

    def test_errors(self):
        idx = build_index(random_gallery(0, n_images=2))
        with pytest.raises(ValueError):
            rank_query(idx, np.ones(6), 0)
        with pytest.raises(DimensionError):
            rank_query(idx, np.ones(5), 1)


SPEC = EvalSpec((1, 5, 10), (0.5, 0.7, 0.9))


class TestEvaluate:
    def test_self_retrieval_strict(self):
        recs = random_gallery(3, n_images=20)
        recs = [InstanceRecord(r.image_id, r.instance_id, r.feature / np.linalg.norm(r.feature), r.gt_box, r.gt_box) for r in recs]
        idx = build_index(recs)
        queries = [
            QueryRecord(q, idx.record(q).feature, idx.record(q).image_id, idx.record(q).instance_id, idx.record(q).gt_box)
            for q in range(len(idx))
        ]
        report = evaluate_benchmark(idx, queries, EvalSpec(identity_mode="strict"))
        assert set(report.box_recall.values()) == {1.0}

    def test_grid_shape(self):
        recs = random_gallery(4, n_images=5)
        idx = build_index(recs)
        report = evaluate_benchmark(idx, random_queries(5, idx, n=5), SPEC)
        assert sorted(report.box_recall) == [(k, t) for k in (1, 5, 10) for t in (0.5, 0.7, 0.9)]

    @pytest.mark.parametrize("seed", range(100))
    @pytest.mark.parametrize("mode", ["iou", "strict"])
    def test_brute_force_oracle(self, seed, mode):
        rng = make_rng(1000 + seed)
        recs = random_gallery(seed, n_images=int(rng.integers(1, 51)), max_inst=8)
        idx = build_index(recs)
        queries = random_queries(seed + 1, idx, n=10)
        spec = EvalSpec((1, 5, 10), (0.5, 0.7, 0.9), mode)
        report = evaluate_benchmark(idx, queries, spec)
        oracle = brute_force(recs, queries, spec)
        assert report.recall_at_k == oracle["recall"]
        assert report.box_recall == oracle["box"]
        assert report.precision_at_iou == oracle["prec"]

    def test_threads_do_not_change_result(self):
        recs = random_gallery(7)
        idx = build_index(recs)
        queries = random_queries(8, idx, n=37)
        base = evaluate_benchmark(idx, queries, SPEC, threads=1)
        for n in (2, 3, 8):
            assert evaluate_benchmark(idx, queries, SPEC, threads=n).to_json() == base.to_json()

    def test_pure_function(self):
        idx = build_index(random_gallery(9, n_images=8))
        queries = random_queries(10, idx, n=8)
        assert evaluate_benchmark(idx, queries, SPEC).to_json() == evaluate_benchmark(idx, queries, SPEC).to_json()

    def test_dangling_reference_named(self):
        idx = build_index(random_gallery(0, n_images=3))
        q = QueryRecord(42, np.ones(6), 999, 0, Box(0, 0, 1, 1))
        with pytest.raises(DanglingReferenceError, match="query 42"):
            evaluate_benchmark(idx, [q])

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            EvalSpec(ks=(0,))
        with pytest.raises(ValueError):
            EvalSpec(taus=(1.0,))
        with pytest.raises(ValueError):
            EvalSpec(identity_mode="fuzzy")
