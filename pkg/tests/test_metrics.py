import json
from pathlib import Path

import numpy as np
import pytest

from captcha_bench import (
    ClassId,
    Detection,
    GroundTruth,
    ModelScoreRow,
    PixelBox,
    RankWeights,
    average_precision,
    confusion_matrix,
    f1,
    iou,
    match_detections,
    mean_ap,
    pr_curve,
    precision,
    rank_models,
    recall,
)
from captcha_bench.errors import ConfigError, DataError

DATA = Path(__file__).parent / "data"


def det(cls, box, conf, image="img"):
    return Detection(image, cls, PixelBox(*box), conf)


def gt(cls, box, image="img"):
    return GroundTruth(image, cls, PixelBox(*box))


def benchmark_rows():
    doc = json.loads((DATA / "model_scores.json").read_text())
    return [ModelScoreRow(**r) for r in doc["rows"]]


# ---------------------------------------------------------------------------
# independent oracle: enumerate every distinct confidence threshold and
# integrate the precision envelope over distinct recall levels
# ---------------------------------------------------------------------------

def ap_oracle(scored, gt_count):
    thresholds = sorted({c for c, _ in scored}, reverse=True)
    points = []
    for t in thresholds:
        kept = [flag for c, flag in scored if c >= t]
        tp = sum(1 for flag in kept if flag)
        points.append((tp / gt_count, tp / len(kept)))
    area = 0.0
    prev_r = 0.0
    for r in sorted({r for r, _ in points}):
        if r <= prev_r:
            continue
        best = max(p for r2, p in points if r2 >= r)
        area += (r - prev_r) * best
        prev_r = r
    return area


class TestIou:
    def test_identity(self):
        b = PixelBox(3, 4, 10, 20)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(PixelBox(0, 0, 10, 10), PixelBox(20, 20, 30, 30)) == 0.0

    def test_hand_area(self):
        # intersection 50, union 150
        assert iou(PixelBox(0, 0, 10, 10), PixelBox(5, 0, 15, 10)) == pytest.approx(1 / 3)

    def test_touching_edges_are_disjoint(self):
        assert iou(PixelBox(0, 0, 10, 10), PixelBox(10, 0, 20, 10)) == 0.0


class TestMatchDetections:
    def test_no_detections(self):
        gts = [gt(ClassId.TEXT, (i * 20, 0, i * 20 + 10, 10)) for i in range(5)]
        r = match_detections([], gts, 0.5)
        assert (r.tp, r.fp, r.fn) == (0, 0, 5)

    def test_counts_reproduce_unsliced_recall(self):
        # 30 ground truths, 20 detected: recall must come out 0.6667
        gts = [gt(ClassId.IMAGE, (i * 30, 0, i * 30 + 20, 20)) for i in range(30)]
        dets = [det(ClassId.IMAGE, (i * 30, 0, i * 30 + 20, 20), 0.9) for i in range(20)]
        r = match_detections(dets, gts, 0.5)
        assert (r.tp, r.fp, r.fn) == (20, 0, 10)
        assert recall(r.tp, r.fn) == pytest.approx(0.6667, abs=1e-4)

    def test_greedy_takes_highest_iou(self):
        g1 = gt(ClassId.TEXT, (0, 0, 10, 10))
        g2 = gt(ClassId.TEXT, (0, 0, 10, 16))
        d = det(ClassId.TEXT, (0, 0, 10, 12), 0.9)
        # IoU with g1 = 10/12, with g2 = 12/16
        r = match_detections([d], [g1, g2], 0.5)
        assert r.matched_pairs[0][1] == 0
        assert (r.tp, r.fp, r.fn) == (1, 0, 1)

    def test_class_must_agree(self):
        r = match_detections(
            [det(ClassId.BUTTON, (0, 0, 10, 10), 0.9)],
            [gt(ClassId.TEXT, (0, 0, 10, 10))],
            0.5,
        )
        assert (r.tp, r.fp, r.fn) == (0, 1, 1)

    def test_each_side_matched_once(self):
        g = gt(ClassId.TEXT, (0, 0, 10, 10))
        d1 = det(ClassId.TEXT, (0, 0, 10, 10), 0.9)
        d2 = det(ClassId.TEXT, (0, 0, 10, 11), 0.8)
        r = match_detections([d1, d2], [g], 0.5)
        assert (r.tp, r.fp, r.fn) == (1, 1, 0)

    def test_mixed_image_ids_rejected(self):
        with pytest.raises(DataError):
            match_detections(
                [det(ClassId.TEXT, (0, 0, 5, 5), 0.5, image="a")],
                [gt(ClassId.TEXT, (0, 0, 5, 5), image="b")],
                0.5,
            )

    def test_confidence_scale_invariance(self):
        rng = np.random.default_rng(3)
        gts = [gt(ClassId.TEXT, (i * 15, 0, i * 15 + 10, 10)) for i in range(4)]
        dets = [
            det(ClassId.TEXT, (i * 15 + 1, 0, i * 15 + 11, 10), float(c))
            for i, c in enumerate(rng.uniform(0.2, 0.8, size=6) )
            if i < 4
        ]
        r1 = match_detections(dets, gts, 0.5)
        squashed = [
            Detection(d.image_id, d.cls, d.box, d.confidence ** 2) for d in dets
        ]
        r2 = match_detections(squashed, gts, 0.5)
        assert r1.matched_pairs == r2.matched_pairs


class TestRatios:
    def test_precision_examples(self):
        assert precision(20, 0) == 1.0
        assert precision(25, 1) == pytest.approx(0.9615, abs=1e-4)
        assert precision(0, 0) is None

    def test_recall_examples(self):
        assert recall(20, 10) == pytest.approx(0.6667, abs=1e-4)
        assert recall(25, 5) == pytest.approx(0.8333, abs=1e-4)
        assert recall(0, 0) is None

    def test_f1_reported_benchmark_values(self):
        assert f1(0.957, 0.596) == pytest.approx(0.735, abs=1e-3)
        assert f1(0.955, 0.569) == pytest.approx(0.713, abs=1e-3)
        assert f1(1, 1) == 1
        assert f1(0, 0) is None

    def test_f1_symmetry_and_bound(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            p, r = rng.uniform(0, 1, size=2)
            if p + r == 0:
                continue
            assert f1(p, r) == pytest.approx(f1(r, p))
            assert f1(p, r) <= (p + r) / 2 + 1e-12


class TestAveragePrecision:
    def test_spec_example(self):
        ap = average_precision([(0.9, True), (0.8, False), (0.7, True)], 2)
        assert ap == pytest.approx(0.8333, abs=1e-4)
        assert ap == ap_oracle([(0.9, True), (0.8, False), (0.7, True)], 2)

    def test_all_tp(self):
        assert average_precision([(0.9, True), (0.5, True)], 2) == 1.0

    def test_no_tp(self):
        assert average_precision([(0.9, False)], 3) == 0.0
        assert average_precision([], 3) == 0.0

    def test_zero_gt_rejected(self):
        with pytest.raises(DataError):
            average_precision([(0.9, True)], 0)

    def test_matches_oracle_on_random_instances(self):
        rng = np.random.default_rng(123)
        for _ in range(300):
            n = int(rng.integers(0, 11))
            gt_count = int(rng.integers(1, 6))
            # confidences over a coarse grid force plenty of ties
            scored = [
                (float(rng.integers(1, 8)) / 8.0, bool(rng.integers(0, 2)))
                for _ in range(n)
            ]
            n_tp = sum(1 for _, flag in scored if flag)
            if n_tp > gt_count:
                scored = [
                    (c, flag and i < gt_count)
                    for i, (c, flag) in enumerate(scored)
                ]
            assert average_precision(scored, gt_count) == ap_oracle(scored, gt_count)

    def test_tie_order_does_not_matter(self):
        a = [(0.5, True), (0.5, False)]
        b = [(0.5, False), (0.5, True)]
        assert average_precision(a, 1) == average_precision(b, 1) == 0.5

    def test_monotone_confidence_transform_invariance(self):
        rng = np.random.default_rng(71)
        for _ in range(100):
            n = int(rng.integers(1, 12))
            gt_count = int(rng.integers(1, 6))
            scored = [
                (float(rng.integers(1, 6)) / 5.0, bool(rng.integers(0, 2)))
                for _ in range(n)
            ]
            squashed = [(c ** 3 / 2, flag) for c, flag in scored]
            assert average_precision(scored, gt_count) == pytest.approx(
                average_precision(squashed, gt_count)
            )


class TestPrCurve:
    def test_recall_monotone(self):
        rng = np.random.default_rng(9)
        scored = [(float(rng.uniform(0, 1)), bool(rng.integers(0, 2))) for _ in range(40)]
        pts = pr_curve(scored, 10)
        recalls = [p.recall for p in pts]
        assert recalls == sorted(recalls)


class TestMeanAp:
    def test_paper_uniform(self):
        aps = {c: 0.995 for c in ClassId}
        assert mean_ap(aps) == pytest.approx(0.995)

    def test_single_class(self):
        assert mean_ap({ClassId.TEXT: 0.7}) == 0.7

    def test_two_values(self):
        assert mean_ap({ClassId.TEXT: 1.0, ClassId.IMAGE: 0.5}) == 0.75

    def test_empty_undefined(self):
        assert mean_ap({}) is None


class TestConfusionMatrix:
    def test_perfect_detector_diagonal(self):
        gts, dets = [], []
        for i, cls in enumerate(ClassId):
            box = (i * 30, 0, i * 30 + 20, 20)
            gts.append(gt(cls, box))
            dets.append(det(cls, box, 0.9))
        m = confusion_matrix(dets, gts, 0.5, 0.25)
        assert np.array_equal(m, np.diag([1, 1, 1, 1, 0]))

    def test_silent_detector_background_row(self):
        gts = [gt(ClassId.TEXT, (0, 0, 10, 10)), gt(ClassId.IMAGE, (20, 0, 30, 10))]
        m = confusion_matrix([], gts, 0.5, 0.25)
        assert m[4, 0] == 1 and m[4, 2] == 1
        assert m.sum() == 2

    def test_misclassified_text_as_button(self):
        g = gt(ClassId.TEXT, (0, 0, 100, 100))
        d = det(ClassId.BUTTON, (0, 15, 100, 100), 0.8)  # IoU 0.85 vs the GT
        m = confusion_matrix([d], [g], 0.5, 0.25)
        assert m[int(ClassId.BUTTON), int(ClassId.TEXT)] == 1
        assert m.sum() == 1

    def test_low_confidence_dropped(self):
        g = gt(ClassId.TEXT, (0, 0, 10, 10))
        d = det(ClassId.TEXT, (0, 0, 10, 10), 0.1)
        m = confusion_matrix([d], [g], 0.5, 0.25)
        assert m[4, 0] == 1 and m.sum() == 1

    def test_column_sums_equal_gt_counts(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            gts, dets = [], []
            for _ in range(int(rng.integers(0, 8))):
                x = float(rng.uniform(0, 200))
                y = float(rng.uniform(0, 200))
                gts.append(gt(ClassId(int(rng.integers(0, 4))), (x, y, x + 20, y + 20)))
            for _ in range(int(rng.integers(0, 8))):
                x = float(rng.uniform(0, 200))
                y = float(rng.uniform(0, 200))
                dets.append(
                    det(ClassId(int(rng.integers(0, 4))), (x, y, x + 20, y + 20),
                        float(rng.uniform(0.3, 1.0)))
                )
            m = confusion_matrix(dets, gts, 0.5, 0.25)
            for cls in ClassId:
                expected = sum(1 for g in gts if g.cls == cls)
                assert m[:, int(cls)].sum() == expected


class TestRankModels:
    def test_reference_benchmark_order(self):
        ranking = rank_models(benchmark_rows(), RankWeights())
        assert [r.model for r in ranking] == [
            "YOLOv5us", "YOLOv8m", "YOLOv10s", "YOLOv10scos", "YOLOv10m",
            "YOLOv5un320", "YOLOv5un", "YOLOv8s", "YOLOv10n", "YOLOv8n",
        ]
        assert ranking[0].score == pytest.approx(0.7411, abs=5e-4)

    def test_single_row(self):
        row = ModelScoreRow("m", 0.8, 0.6, 0.7, 0.5)
        out = rank_models([row])
        assert out[0].score == pytest.approx(0.5 * 0.7 + 0.25 * 0.5 + 0.125 * 0.8 + 0.125 * 0.6)

    def test_f1_only_weights(self):
        rows = benchmark_rows()
        ranking = rank_models(rows, RankWeights(f1=1.0, map=0.0, precision=0.0, recall=0.0))
        f1s = [r.row.f1 for r in ranking]
        assert f1s == sorted(f1s, reverse=True)

    def test_tie_keeps_input_order(self):
        rows = [
            ModelScoreRow("first", 0.9, 0.9, 0.9, 0.9),
            ModelScoreRow("second", 0.9, 0.9, 0.9, 0.9),
        ]
        assert [r.model for r in rank_models(rows)] == ["first", "second"]

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            RankWeights(f1=1.2, map=-0.2, precision=0.0, recall=0.0)

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            RankWeights(f1=0.5, map=0.25, precision=0.125, recall=0.2)
