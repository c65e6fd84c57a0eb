import math

import numpy as np
import pytest

from hyperfuse.autodiff import Tape, Tensor
from hyperfuse.boxes import Detection, GroundTruthBox, iou
from hyperfuse.head import (HeadOutput, LevelPred, assign_targets, decode_boxes,
                            detection_loss, head_forward, init_head, nms)
from hyperfuse.params import ModelParams

from _oracles import finite_difference


def make_head_output(image_size=128, k=2, fill=0.0, seed=None):
    """HeadOutput with constant or random logits on the standard 3 levels."""
    rng = np.random.default_rng(seed) if seed is not None else None
    levels = []
    for stride in (8, 16, 32):
        side = image_size // stride
        def t(c):
            if rng is None:
                return Tensor(np.full((c, side, side), fill))
            return Tensor(rng.standard_normal((c, side, side)))
        levels.append(LevelPred(obj=t(1), cls=t(k), box=t(4)))
    return HeadOutput(levels=levels, strides=(8, 16, 32), image_size=(image_size, image_size))


class TestHeadForward:
    def test_shared_head_shapes_for_640(self):
        mp = ModelParams()
        hp = init_head(mp, head_width=4, num_classes=2,
                       rng=np.random.default_rng(0), dtype=np.float64)
        ns = [Tensor(np.random.default_rng(i).random((4, s, s)))
              for i, s in enumerate((80, 40, 20))]
        out = head_forward(ns, hp)
        assert [lp.cls.shape for lp in out.levels] == [(2, 80, 80), (2, 40, 40), (2, 20, 20)]
        assert [lp.obj.shape[0] for lp in out.levels] == [1, 1, 1]
        assert [lp.box.shape[0] for lp in out.levels] == [4, 4, 4]
        assert out.image_size == (640, 640)

    def test_zero_weights_give_score_half(self):
        mp = ModelParams()
        hp = init_head(mp, 4, 2, np.random.default_rng(0), np.float64)
        for name in ("head.obj.w", "head.cls.w", "head.box.w"):
            mp[name].data[:] = 0.0
        ns = [Tensor(np.random.default_rng(7).random((4, s, s))) for s in (8, 4, 2)]
        out = head_forward(ns, hp)
        assert all(np.all(lp.obj.data == 0.0) for lp in out.levels)
        dets = decode_boxes(out, score_thresh=0.0)
        assert all(d.score == pytest.approx(0.25) for d in dets)  # sigmoid(0)^2

    def test_deterministic(self):
        mp = ModelParams()
        hp = init_head(mp, 4, 3, np.random.default_rng(1), np.float64)
        ns = [Tensor(np.random.default_rng(8).random((4, s, s))) for s in (8, 4, 2)]
        a = head_forward(ns, hp)
        b = head_forward(ns, hp)
        for la, lb in zip(a.levels, b.levels):
            np.testing.assert_array_equal(la.cls.data, lb.cls.data)


class TestAssignTargets:
    SHAPES = [(16, 16), (8, 8), (4, 4)]

    def test_center_cell_at_stride_8(self):
        gt = GroundTruthBox(0, (95.0, 95.0, 105.0, 105.0))  # center (100, 100)
        ta = assign_targets([gt], (128, 128), self.SHAPES)
        lt = ta.levels[0]
        assert (lt.pos_i.tolist(), lt.pos_j.tolist()) == ([12], [12])
        assert ta.num_pos == 1 and ta.num_dropped == 0

    def test_sqrt_area_200_routes_to_stride_32(self):
        gt = GroundTruthBox(1, (0.0, 0.0, 200.0, 200.0))
        ta = assign_targets([gt], (256, 256), [(32, 32), (16, 16), (8, 8)])
        assert len(ta.levels[2].pos_i) == 1
        assert len(ta.levels[0].pos_i) == len(ta.levels[1].pos_i) == 0

    def test_identical_boxes_one_positive_one_drop(self):
        gt = GroundTruthBox(0, (10.0, 10.0, 20.0, 20.0))
        ta = assign_targets([gt, gt], (128, 128), self.SHAPES)
        assert ta.num_pos == 1
        assert ta.num_dropped == 1

    def test_smaller_area_wins_cell(self):
        big = GroundTruthBox(0, (8.0, 8.0, 22.0, 22.0))
        small = GroundTruthBox(1, (12.0, 12.0, 18.0, 18.0))
        ta = assign_targets([big, small], (128, 128), self.SHAPES)
        assert ta.levels[0].cls_id.tolist() == [1]


class TestDetectionLoss:
    def test_perfect_predictions_near_zero(self):
        gts = [GroundTruthBox(0, (40.0, 40.0, 60.0, 56.0)),
               GroundTruthBox(1, (80.0, 88.0, 100.0, 104.0))]
        pred = make_head_output(128, k=2, fill=-30.0)
        ta = assign_targets(gts, (128, 128), TestAssignTargets.SHAPES)
        lt = ta.levels[0]
        for n, (i, j, cid, box) in enumerate(zip(lt.pos_i, lt.pos_j, lt.cls_id, lt.boxes)):
            pred.levels[0].obj.data[0, i, j] = 30.0
            pred.levels[0].cls.data[:, i, j] = -30.0
            pred.levels[0].cls.data[cid, i, j] = 30.0
            cx, cy = (j + 0.5) * 8, (i + 0.5) * 8
            dists = (cx - box[0], cy - box[1], box[2] - cx, box[3] - cy)
            assert all(d > 0 for d in dists)
            pred.levels[0].box.data[:, i, j] = np.log(dists)
        loss, parts = detection_loss(pred, ta)
        assert float(loss.data) < 1e-6
        assert parts["num_pos"] == 2

    def test_zero_logits_no_positives_gives_ln2(self):
        pred = make_head_output(128, fill=0.0)
        ta = assign_targets([], (128, 128), TestAssignTargets.SHAPES)
        loss, parts = detection_loss(pred, ta)
        assert float(loss.data) == pytest.approx(math.log(2.0), rel=1e-12)
        assert parts["class"] == 0.0 and parts["box"] == 0.0

    def test_no_gts_class_and_box_exactly_zero(self):
        pred = make_head_output(128, seed=3)
        ta = assign_targets([], (128, 128), TestAssignTargets.SHAPES)
        loss, parts = detection_loss(pred, ta)
        assert parts["class"] == 0.0 and parts["box"] == 0.0
        assert float(loss.data) > 0.0

    def test_loss_nonnegative_on_random_preds(self):
        for seed in range(5):
            pred = make_head_output(64, seed=seed)
            ta = assign_targets([GroundTruthBox(0, (10.0, 10.0, 30.0, 28.0))],
                                (64, 64), [(8, 8), (4, 4), (2, 2)])
            loss, _ = detection_loss(pred, ta)
            assert float(loss.data) >= 0.0

    def test_gradient_on_two_cell_toy(self):
        gts = [GroundTruthBox(0, (2.0, 2.0, 14.0, 13.0)),
               GroundTruthBox(1, (18.0, 17.0, 30.0, 30.0))]
        ta = assign_targets(gts, (32, 32), [(4, 4), (2, 2), (1, 1)])
        rng = np.random.default_rng(5)
        arrays = [rng.standard_normal((1, 4, 4)), rng.standard_normal((2, 4, 4)),
                  rng.standard_normal((4, 4, 4))]

        def build(ts):
            levels = [LevelPred(obj=ts[0], cls=ts[1], box=ts[2]),
                      LevelPred(obj=Tensor(np.zeros((1, 2, 2))),
                                cls=Tensor(np.zeros((2, 2, 2))),
                                box=Tensor(np.zeros((4, 2, 2)))),
                      LevelPred(obj=Tensor(np.zeros((1, 1, 1))),
                                cls=Tensor(np.zeros((2, 1, 1))),
                                box=Tensor(np.zeros((4, 1, 1))))]
            pred = HeadOutput(levels=levels, strides=(8, 16, 32), image_size=(32, 32))
            return detection_loss(pred, ta)[0]

        def run(arrs):
            return float(build([Tensor(a) for a in arrs]).data)

        ts = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape() as tape:
            loss = build(ts)
        tape.backward(loss)
        for t, fd in zip(ts, finite_difference(run, arrays)):
            np.testing.assert_allclose(t.grad, fd, rtol=1e-4, atol=1e-7)


class TestDecodeBoxes:
    def test_ln10_regression_gives_pm_10px(self):
        pred = make_head_output(128, fill=0.0)
        pred.levels[0].box.data[:] = math.log(10.0)
        pred.levels[0].obj.data[0, 3, 4] = 5.0
        dets = decode_boxes(pred, score_thresh=0.4)
        match = [d for d in dets if d.box[0] == pytest.approx(36.0 - 10.0)]
        assert match
        d = match[0]
        cx, cy = (4 + 0.5) * 8, (3 + 0.5) * 8
        assert d.box == pytest.approx((cx - 10, cy - 10, cx + 10, cy + 10))

    def test_threshold_one_empty(self):
        assert decode_boxes(make_head_output(64, fill=3.0), 1.0) == []

    def test_clamped_to_image(self):
        pred = make_head_output(64, fill=0.0)
        pred.levels[0].box.data[:] = math.log(500.0)
        dets = decode_boxes(pred, score_thresh=0.2)
        assert dets
        for d in dets:
            x1, y1, x2, y2 = d.box
            assert 0.0 <= x1 < x2 <= 64.0
            assert 0.0 <= y1 < y2 <= 64.0

    def test_invariants_on_random_outputs(self):
        for seed in range(5):
            pred = make_head_output(64, seed=seed)
            for d in decode_boxes(pred, 0.1):
                x1, y1, x2, y2 = d.box
                assert x1 < x2 and y1 < y2
                assert 0.0 <= d.score <= 1.0


class TestNms:
    def test_disjoint_unchanged(self):
        dets = [Detection(0, 0.9, (0.0, 0.0, 10.0, 10.0)),
                Detection(0, 0.8, (20.0, 20.0, 30.0, 30.0))]
        assert nms(dets, 0.5) == dets

    def test_identical_boxes_keep_higher_score(self):
        box = (5.0, 5.0, 15.0, 15.0)
        dets = [Detection(0, 0.8, box), Detection(0, 0.9, box)]
        kept = nms(dets, 0.5)
        assert len(kept) == 1 and kept[0].score == 0.9

    def test_overlap_one_seventh_suppressed_at_low_threshold(self):
        a = Detection(0, 0.9, (0.0, 0.0, 2.0, 2.0))
        b = Detection(0, 0.8, (1.0, 1.0, 3.0, 3.0))
        assert iou(a.box, b.box) == pytest.approx(1.0 / 7.0)
        assert nms([a, b], 0.1) == [a]
        assert nms([a, b], 0.15) == [a, b]  # strict comparison keeps the pair

    def test_classwise_independence(self):
        box = (0.0, 0.0, 10.0, 10.0)
        dets = [Detection(0, 0.9, box), Detection(1, 0.8, box)]
        assert len(nms(dets, 0.5)) == 2

    def test_scores_nonincreasing_and_subset(self):
        rng = np.random.default_rng(6)
        dets = []
        for _ in range(40):
            x1, y1 = rng.uniform(0, 50, 2)
            w, h = rng.uniform(4, 20, 2)
            dets.append(Detection(int(rng.integers(0, 3)), float(rng.random()),
                                  (x1, y1, x1 + w, y1 + h)))
        kept = nms(dets, 0.4)
        assert all(k in dets for k in kept)
        by_class = {}
        for k in kept:
            by_class.setdefault(k.class_id, []).append(k.score)
        for scores in by_class.values():
            assert scores == sorted(scores, reverse=True)

    def test_score_tie_broken_by_index(self):
        box_a = (0.0, 0.0, 10.0, 10.0)
        box_b = (1.0, 1.0, 10.0, 10.0)
        dets = [Detection(0, 0.5, box_a), Detection(0, 0.5, box_b)]
        kept = nms(dets, 0.3)
        assert kept == [dets[0]]
