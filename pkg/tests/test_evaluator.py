import numpy as np
import pytest

from hyperfuse.boxes import Detection, GroundTruthBox, iou
from hyperfuse.evaluator import (COCO_IOU_THRESHOLDS, average_precision,
                                 class_pr_data, evaluate, match_detections)

from _oracles import ap_101_point, iou_formula


def det(score, box, cid=0):
    return Detection(class_id=cid, score=score, box=box)


def gt(box, cid=0):
    return GroundTruthBox(class_id=cid, box=box)


class TestIoU:
    def test_identical(self):
        assert iou((0, 0, 4, 4), (0, 0, 4, 4)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0

    def test_one_seventh(self):
        assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1.0 / 7.0)

    def test_matches_formula_fuzz(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = rng.uniform(0, 50, 2)
            b = rng.uniform(0, 50, 2)
            box_a = (a[0], a[1], a[0] + rng.uniform(1, 30), a[1] + rng.uniform(1, 30))
            box_b = (b[0], b[1], b[0] + rng.uniform(1, 30), b[1] + rng.uniform(1, 30))
            assert iou(box_a, box_b) == pytest.approx(iou_formula(box_a, box_b))


class TestMatchDetections:
    def test_exact_hit(self):
        tp, matched = match_detections([det(0.9, (0, 0, 10, 10))],
                                       [gt((0, 0, 10, 10))], 0.5)
        assert tp == [True] and matched == [True]

    def test_double_detection_second_is_fp(self):
        box = (0.0, 0.0, 10.0, 10.0)
        tp, matched = match_detections([det(0.9, box), det(0.8, box)], [gt(box)], 0.5)
        assert tp == [True, False] and matched == [True]

    def test_greedy_trace_tp_fp_tp(self):
        gts = [gt((0, 0, 10, 10)), gt((20, 20, 30, 30))]
        dets = [det(0.9, (0, 0, 10, 10)),      # hit gt0
                det(0.8, (40, 40, 50, 50)),    # miss
                det(0.7, (20, 20, 30, 30))]    # hit gt1
        tp, matched = match_detections(dets, gts, 0.5)
        assert tp == [True, False, True]
        assert matched == [True, True]

    def test_flags_follow_original_order_under_ties(self):
        box = (0.0, 0.0, 10.0, 10.0)
        dets = [det(0.5, box), det(0.5, (100, 100, 110, 110))]
        tp, _ = match_detections(dets, [gt(box)], 0.5)
        assert tp == [True, False]


class TestAveragePrecision:
    def test_perfect(self):
        assert average_precision([True, True], [0.9, 0.8], 2) == pytest.approx(1.0)

    def test_no_detections(self):
        assert average_precision([], [], 3) == 0.0

    def test_hand_traced_case(self):
        ap = average_precision([True, False, True], [0.9, 0.8, 0.7], 2)
        expected = (51 * 1.0 + 50 * (2.0 / 3.0)) / 101.0
        assert ap == pytest.approx(expected, abs=1e-12)
        assert ap == pytest.approx(0.8350, abs=1e-4)

    def test_matches_pointwise_oracle_fuzz(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(1, 20))
            flags = rng.random(n) > 0.4
            scores = rng.random(n)
            n_gt = max(int(flags.sum()), int(rng.integers(1, 8)))
            got = average_precision(flags.tolist(), scores.tolist(), n_gt)
            ref = ap_101_point(list(zip(flags.tolist(), scores.tolist())), n_gt)
            assert got == pytest.approx(ref, abs=1e-12)

    def test_appending_weakest_detection_never_lowers_ap(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(1, 15))
            flags = (rng.random(n) > 0.5).tolist()
            scores = rng.uniform(0.2, 1.0, n).tolist()
            n_gt = max(sum(flags), 1) + int(rng.integers(0, 3))
            base = average_precision(flags, scores, n_gt)
            for extra in (True, False):
                got = average_precision(flags + [extra], scores + [0.01], n_gt)
                assert got >= base - 1e-12


class TestEvaluate:
    def test_perfect_predictions(self):
        gts = {0: [gt((0, 0, 10, 10)), gt((20, 20, 40, 40), cid=1)],
               1: [gt((5, 5, 25, 25))]}
        preds = {i: [det(0.9, g.box, g.class_id) for g in v] for i, v in gts.items()}
        res = evaluate(preds, gts)
        assert res.ap == 1.0 and res.ap50 == 1.0 and res.ar == 1.0
        assert set(res.per_class) == {0, 1}

    def test_empty_predictions_all_zero(self):
        gts = {0: [gt((0, 0, 10, 10))]}
        res = evaluate({0: []}, gts)
        assert (res.ap, res.ap50, res.ar) == (0.0, 0.0, 0.0)

    def test_single_image_hand_trace(self):
        gts = {0: [gt((0, 0, 10, 10)), gt((20, 20, 30, 30))]}
        preds = {0: [det(0.9, (0, 0, 10, 10)), det(0.8, (40, 40, 50, 50)),
                     det(0.7, (20, 20, 30, 30))]}
        res = evaluate(preds, gts)
        assert res.ap50 == pytest.approx(0.8350, abs=1e-4)

    def test_unknown_image_id_rejected(self):
        with pytest.raises(KeyError):
            evaluate({5: []}, {0: [gt((0, 0, 10, 10))]})

    def test_ap50_at_least_ap_fuzz(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            gts, preds = {}, {}
            for img in range(3):
                n_gt = int(rng.integers(0, 5))
                boxes = []
                for _ in range(n_gt):
                    x, y = rng.uniform(0, 80, 2)
                    boxes.append(gt((x, y, x + rng.uniform(4, 20), y + rng.uniform(4, 20)),
                                    cid=int(rng.integers(0, 2))))
                gts[img] = boxes
                dets = []
                for g in boxes:
                    if rng.random() < 0.7:
                        jx, jy = rng.uniform(-4, 4, 2)
                        x1, y1, x2, y2 = g.box
                        dets.append(det(float(rng.random()),
                                        (x1 + jx, y1 + jy, x2 + jx, y2 + jy), g.class_id))
                for _ in range(int(rng.integers(0, 3))):
                    x, y = rng.uniform(0, 80, 2)
                    dets.append(det(float(rng.random()),
                                    (x, y, x + 10, y + 10), int(rng.integers(0, 2))))
                preds[img] = dets
            if not any(gts.values()):
                continue
            res = evaluate(preds, gts)
            assert res.ap50 >= res.ap - 1e-12

    def test_order_invariance(self):
        rng = np.random.default_rng(4)
        gts, preds = {}, {}
        for img in range(4):
            x, y = rng.uniform(0, 60, 2)
            gts[img] = [gt((x, y, x + 15, y + 15))]
            preds[img] = [det(float(rng.random()), (x + 1, y + 1, x + 16, y + 16))]
        a = evaluate(preds, gts)
        ids = list(reversed(list(gts)))
        b = evaluate({i: preds[i] for i in ids}, {i: gts[i] for i in ids})
        assert a == b

    def test_max_dets_truncation(self):
        box = (0.0, 0.0, 10.0, 10.0)
        gts = {0: [gt(box)]}
        # one good low-score detection hidden behind 100 high-score misses
        preds = {0: [det(0.9 - 0.001 * i, (50.0 + i, 50.0, 61.0 + i, 61.0))
                     for i in range(100)] + [det(0.05, box)]}
        res = evaluate(preds, gts)
        assert res.ar == 0.0  # the hit fell outside the top-100 cap

    def test_classes_without_gt_excluded(self):
        gts = {0: [gt((0, 0, 10, 10), cid=0)]}
        preds = {0: [det(0.9, (0, 0, 10, 10), cid=0), det(0.8, (0, 0, 10, 10), cid=7)]}
        res = evaluate(preds, gts)
        assert set(res.per_class) == {0}
        assert res.ap50 == 1.0

    def test_thresholds_are_coco_ladder(self):
        np.testing.assert_allclose(COCO_IOU_THRESHOLDS,
                                   [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95])

    def test_pr_data_shape(self):
        gts = {0: [gt((0, 0, 10, 10))]}
        preds = {0: [det(0.9, (0, 0, 10, 10))]}
        curves = class_pr_data(preds, gts)
        rec, prec = curves[0]
        assert rec[-1] == 1.0 and prec[-1] == 1.0
