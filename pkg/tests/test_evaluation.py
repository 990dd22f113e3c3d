"""Retrieval and localization metrics against brute-force oracles."""
import csv
import json
import math

import numpy as np
import pytest

from tempvl.core.tensor import ShapeError
from tempvl.services.encoders import TVLModel
from tempvl.services.evaluation import (
    Evaluator,
    alignment_rate,
    boundary_metrics,
    decode_boundary,
    export_similarity_heatmap,
    recall_at_k,
    sidecar_path,
    temporal_iou,
)
from tempvl.services.synthdata import SeedLedger, generate_batch


def oracle_recall(sim, k):
    hits = 0
    for row in range(sim.shape[0]):
        order = sorted(range(sim.shape[1]), key=lambda col: (-sim[row, col], col))
        hits += row in order[:k]
    return hits / sim.shape[0]


def oracle_decode(r):
    best, best_span = -math.inf, None
    for ed in range(r.shape[0]):
        for st in range(ed + 1):
            score = r[st, 0] + r[ed, 1]
            if score > best:
                best, best_span = score, (st, ed)
    return best_span


class TestRecall:
    def test_identity_similarity(self):
        result = recall_at_k(np.eye(5), range(5), ks=(1, 5))
        assert result[1] == 1.0 and result[5] == 1.0
        assert result.n_queries == 5

    def test_anti_diagonal_similarity(self):
        result = recall_at_k(np.fliplr(np.eye(4)), range(4), ks=(1, 4))
        assert result[1] == 0.0
        assert result[4] == 1.0

    def test_ties_favour_lower_index(self):
        sim = np.ones((2, 3))
        result = recall_at_k(sim, [0, 2], ks=(1, 2, 3))
        assert result.recall_at == {1: 0.5, 2: 0.5, 3: 1.0}

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_sorting_oracle(self, seed):
        rng = np.random.default_rng(seed)
        g = int(rng.integers(1, 17))
        # few distinct values so ties are common
        sim = rng.integers(0, 4, size=(g, g)).astype(float)
        ks = sorted({1, min(5, g), g})
        result = recall_at_k(sim, range(g), ks)
        for k in ks:
            assert result[k] == pytest.approx(oracle_recall(sim, k))
        assert result[g] == 1.0

    def test_mapping_ground_truth(self):
        sim = np.array([[0.1, 0.9], [0.8, 0.2]])
        assert recall_at_k(sim, {0: 1, 1: 0}, ks=(1,))[1] == 1.0

    def test_k_beyond_gallery(self):
        with pytest.raises(ValueError):
            recall_at_k(np.eye(3), range(3), ks=(5,))

    def test_missing_ground_truth(self):
        with pytest.raises(ValueError):
            recall_at_k(np.eye(3), {0: 0, 1: 1}, ks=(1,))

    def test_needs_a_matrix(self):
        with pytest.raises(ShapeError):
            recall_at_k(np.ones(3), range(3), ks=(1,))


class TestIoU:
    def test_partial_overlap(self):
        assert temporal_iou((0, 3), (2, 5)) == pytest.approx(1 / 3)

    def test_single_slot(self):
        assert temporal_iou((4, 4), (4, 4)) == 1.0
        assert temporal_iou((4, 4), (5, 5)) == 0.0

    def test_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            a = tuple(sorted(int(x) for x in rng.integers(0, 30, size=2)))
            b = tuple(sorted(int(x) for x in rng.integers(0, 30, size=2)))
            iou = temporal_iou(a, b)
            assert iou == temporal_iou(b, a)
            assert 0.0 <= iou <= 1.0
            assert temporal_iou(a, a) == 1.0
            covered = set(range(a[0], a[1] + 1)) | set(range(b[0], b[1] + 1))
            shared = set(range(a[0], a[1] + 1)) & set(range(b[0], b[1] + 1))
            assert iou == pytest.approx(len(shared) / len(covered))


class TestBoundaryMetrics:
    def test_accuracies(self):
        result = boundary_metrics([(0, 3), (2, 2), (1, 4)], [(0, 3), (2, 5), (0, 4)])
        assert result.start_acc == pytest.approx(2 / 3)
        assert result.end_acc == pytest.approx(2 / 3)
        assert result.both_acc == pytest.approx(1 / 3)
        assert result.n_queries == 3
        assert result.recall_at_iou[0.3] == pytest.approx(2 / 3)

    def test_empty(self):
        with pytest.raises(ValueError):
            boundary_metrics([], [])

    def test_reversed_interval(self):
        with pytest.raises(ValueError):
            boundary_metrics([(3, 1)], [(0, 1)])


class TestDecodeBoundary:
    def test_single_slot(self):
        assert decode_boundary(np.array([[0.3, -1.0]])) == (0, 0)

    def test_end_never_precedes_start(self):
        r = np.array([[0.0, 5.0], [9.0, 0.0], [0.0, 1.0]])
        # best unconstrained pair would be (1, 0)
        assert decode_boundary(r) == (1, 2)

    def test_matches_quadratic_oracle(self):
        rng = np.random.default_rng(0)
        for case in range(1000):
            m = int(rng.integers(1, 65))
            if case % 2:
                r = rng.normal(size=(m, 2))
            else:
                r = rng.integers(-3, 4, size=(m, 2)).astype(float)
            assert decode_boundary(r) == oracle_decode(r)

    def test_shape(self):
        with pytest.raises(ShapeError):
            decode_boundary(np.zeros((4, 3)))


class TestAlignment:
    def test_rate(self):
        sim = np.array([[0.9, 0.1], [0.8, 0.2], [0.1, 0.3], [0.0, 0.1]])
        assert alignment_rate(sim, [(0, 1), (2, 3)]) == 1.0
        assert alignment_rate(sim, [(2, 3), (0, 1)]) == 0.0

    def test_boundary_covering_every_frame(self):
        with pytest.raises(ValueError):
            alignment_rate(np.ones((3, 1)), [(0, 2)])

    def test_one_boundary_per_column(self):
        with pytest.raises(ValueError):
            alignment_rate(np.ones((3, 2)), [(0, 0)])


class TestHeatmap:
    def test_all_ones_and_sidecar(self, tmp_path):
        out = tmp_path / "maps" / "heat.csv"
        csv_path, sidecar = export_similarity_heatmap(np.ones((6, 4)), np.ones((3, 4)), out, {"t0": (0, 1)})
        assert sidecar == sidecar_path(out) == tmp_path / "maps" / "heat.boundaries.json"
        with csv_path.open(newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        assert len(rows) == 6 and all(len(row) == 3 for row in rows)
        assert all(float(v) == pytest.approx(1.0) for row in rows for v in row)
        assert json.loads(sidecar.read_text(encoding="utf-8")) == {"boundaries": {"t0": [0, 1]}}

    def test_values_round_trip_exactly(self, tmp_path, rng):
        frames, texts = rng.normal(size=(5, 3)), rng.normal(size=(2, 3))
        path, _ = export_similarity_heatmap(frames, texts, tmp_path / "h.csv")
        values = np.loadtxt(path, delimiter=",")
        f = frames / np.linalg.norm(frames, axis=-1, keepdims=True)
        t = texts / np.linalg.norm(texts, axis=-1, keepdims=True)
        assert np.array_equal(values, f @ t.T)


class TestEvaluator:
    def test_same_split_seed_same_report(self, small_config, small_model):
        a = Evaluator(small_config).evaluate(small_model, split_seed=5)
        b = Evaluator(small_config).evaluate(small_model, split_seed=5)
        assert a.model_dump() == b.model_dump()
        assert a.split_seed == 5

    def test_report_ranges(self, small_config, small_model):
        report = Evaluator(small_config).evaluate(small_model)
        summary = report.summary()
        assert {"t2v_r1", "v2t_r1", "boundary_acc", "cls_match_acc", "alignment_rate"} <= set(summary)
        assert all(0.0 <= v <= 1.0 for v in summary.values())
        assert report.text_to_video.n_queries == small_config.train.eval_gallery_size
        assert report.localization.n_queries == small_config.train.eval_batches * small_config.train.batch_size
        assert report.localization.moment_loss > 0

    def test_match_metric_follows_the_text_merge(self, make_config, small_model):
        cls_report = Evaluator(make_config()).evaluate(small_model)
        assert cls_report.cls_match_acc is not None and cls_report.span_match_acc is None
        words_report = Evaluator(make_config(text_merge="MergeWords")).evaluate(small_model)
        assert words_report.cls_match_acc is None
        assert 0.0 <= words_report.span_match_acc <= 1.0
        summary = words_report.summary()
        assert "span_match_acc" in summary and "cls_match_acc" not in summary

    def test_heldout_seeds_are_recorded(self, small_config, small_model):
        ledger = SeedLedger()
        Evaluator(small_config, ledger=ledger).evaluate(small_model)
        # gallery plus one batch per eval batch
        assert len(ledger.seeds("heldout")) == 1 + small_config.train.eval_batches

    def test_non_finite_parameters(self, small_config):
        model = TVLModel(small_config.model, seed=0)
        dict(model.named_parameters())["heads.match.weight"].data[0, 0] = np.nan
        with pytest.raises(FloatingPointError, match="heads.match.weight"):
            Evaluator(small_config).evaluate(model)

    def test_similarity_map_shape(self, small_config, small_model):
        pairs = generate_batch(small_config.data, 3, seed=1)
        sim, plan = Evaluator(small_config).similarity_map(small_model, pairs, seed=2)
        assert sim.shape == (3 * small_config.model.frames_per_video, 3)
        assert len(plan.slots) == sim.shape[0]
