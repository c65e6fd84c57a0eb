"""Anchor-free one-stage detection head: per-level logits, size-routed target
assignment, BCE + IoU loss, box decoding, and greedy class-wise NMS.

Boxes are regressed as log-space distances from the cell center to the four
box edges; objectness and class outputs are raw logits shared across levels
by 1x1 convolutions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import (ShapeError, Tensor, bce_with_logits, conv2d, exp,
                       gather_pixels, maximum, minimum, narrow, tsum)
from .boxes import Detection, GroundTruthBox, iou
from .params import ModelParams
from .backbone import _conv_pair

DEFAULT_STRIDES = (8, 16, 32)
DEFAULT_SIZE_THRESHOLDS = (64.0, 160.0)
DEFAULT_LOSS_WEIGHTS = (1.0, 0.5, 2.0)
# clamp for exp() when decoding unbounded regressions; the lower bound keeps
# decoded extents above float rounding so boxes never collapse to zero width
_MAX_LOG_EXTENT = 20.0
_MIN_LOG_EXTENT = -3.0


@dataclass
class LevelPred:
    obj: Tensor  # [1, H, W] logits
    cls: Tensor  # [K, H, W] logits
    box: Tensor  # [4, H, W] log-space l, t, r, b


@dataclass
class HeadOutput:
    levels: list[LevelPred]
    strides: tuple[int, ...]
    image_size: tuple[int, int]  # (H, W)

    @property
    def num_classes(self) -> int:
        return self.levels[0].cls.shape[0]


@dataclass
class HeadParams:
    obj: tuple[Tensor, Tensor]
    cls: tuple[Tensor, Tensor]
    box: tuple[Tensor, Tensor]
    num_classes: int


def init_head(mp: ModelParams, head_width: int, num_classes: int,
              rng: np.random.Generator, dtype) -> HeadParams:
    """Create shared head weights under the ``head.`` prefix."""
    return HeadParams(
        obj=_conv_pair(mp, "head.obj", 1, head_width, 1, rng, dtype),
        cls=_conv_pair(mp, "head.cls", num_classes, head_width, 1, rng, dtype),
        box=_conv_pair(mp, "head.box", 4, head_width, 1, rng, dtype),
        num_classes=num_classes,
    )


def head_forward(ns: Sequence[Tensor], hp: HeadParams,
                 strides: tuple[int, ...] = DEFAULT_STRIDES) -> HeadOutput:
    if len(ns) != len(strides):
        raise ShapeError(f"expected {len(strides)} levels, got {len(ns)}")
    levels = [LevelPred(obj=conv2d(n, *hp.obj), cls=conv2d(n, *hp.cls), box=conv2d(n, *hp.box))
              for n in ns]
    h = ns[0].shape[1] * strides[0]
    w = ns[0].shape[2] * strides[0]
    return HeadOutput(levels=levels, strides=tuple(strides), image_size=(h, w))


@dataclass
class LevelTargets:
    obj_target: np.ndarray  # [H, W] in {0, 1}
    pos_i: np.ndarray
    pos_j: np.ndarray
    cls_id: np.ndarray
    boxes: np.ndarray       # [P, 4] ground-truth boxes for the positive cells


@dataclass
class TargetAssignment:
    levels: list[LevelTargets]
    num_pos: int
    num_dropped: int


def assign_targets(gts: Sequence[GroundTruthBox], image_size: tuple[int, int],
                   level_shapes: Sequence[tuple[int, int]],
                   strides: tuple[int, ...] = DEFAULT_STRIDES,
                   size_thresholds: tuple[float, float] = DEFAULT_SIZE_THRESHOLDS) -> TargetAssignment:
    """Route each box by sqrt(area) to one level and mark its center cell.

    When two boxes land on the same cell the smaller-area one wins and the
    loser is dropped (counted, never reassigned).
    """
    chosen: dict[tuple[int, int, int], tuple[float, GroundTruthBox]] = {}
    dropped = 0
    for gt in gts:
        x1, y1, x2, y2 = gt.box
        area = (x2 - x1) * (y2 - y1)
        sa = math.sqrt(area)
        lvl = 0 if sa < size_thresholds[0] else (1 if sa < size_thresholds[1] else 2)
        s = strides[lvl]
        hl, wl = level_shapes[lvl]
        i = min(int((y1 + y2) / 2 // s), hl - 1)
        j = min(int((x1 + x2) / 2 // s), wl - 1)
        key = (lvl, i, j)
        prev = chosen.get(key)
        if prev is None:
            chosen[key] = (area, gt)
        else:
            dropped += 1
            if area < prev[0]:
                chosen[key] = (area, gt)
    levels = []
    for lvl, (hl, wl) in enumerate(level_shapes):
        obj = np.zeros((hl, wl))
        pos_i, pos_j, cls_id, boxes = [], [], [], []
        for (l, i, j), (_, gt) in chosen.items():
            if l != lvl:
                continue
            obj[i, j] = 1.0
            pos_i.append(i)
            pos_j.append(j)
            cls_id.append(gt.class_id)
            boxes.append(gt.box)
        levels.append(LevelTargets(
            obj_target=obj,
            pos_i=np.asarray(pos_i, dtype=np.int64),
            pos_j=np.asarray(pos_j, dtype=np.int64),
            cls_id=np.asarray(cls_id, dtype=np.int64),
            boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        ))
    return TargetAssignment(levels=levels, num_pos=len(chosen), num_dropped=dropped)


def detection_loss(pred: HeadOutput, targets: TargetAssignment,
                   weights: tuple[float, float, float] = DEFAULT_LOSS_WEIGHTS):
    """Objectness BCE (mean over every cell), class BCE and 1-IoU (summed over
    positive cells, normalized by max(1, #positives)).

    Returns the scalar loss tensor and a float breakdown.
    """
    w_obj, w_cls, w_box = weights
    k = pred.num_classes
    total_cells = sum(lp.obj.shape[1] * lp.obj.shape[2] for lp in pred.levels)
    n_pos = targets.num_pos
    norm = 1.0 / max(1, n_pos)

    obj_sum = None
    cls_sum = None
    box_sum = None
    for lp, lt, stride in zip(pred.levels, targets.levels, pred.strides):
        dtype = lp.obj.dtype
        term = tsum(bce_with_logits(lp.obj, lt.obj_target[None].astype(dtype)))
        obj_sum = term if obj_sum is None else obj_sum + term
        p = len(lt.pos_i)
        if p == 0:
            continue
        flat = lt.pos_i * lp.obj.shape[2] + lt.pos_j
        # class BCE against one-hot targets at the positive cells
        cls_at = gather_pixels(lp.cls, flat)
        onehot = np.zeros((k, p))
        onehot[lt.cls_id, np.arange(p)] = 1.0
        cterm = tsum(bce_with_logits(cls_at, onehot.astype(dtype)))
        cls_sum = cterm if cls_sum is None else cls_sum + cterm
        # IoU between decoded boxes and their targets
        box_at = gather_pixels(lp.box, flat)
        d = exp(minimum(box_at, _MAX_LOG_EXTENT))
        cx = (lt.pos_j + 0.5) * stride
        cy = (lt.pos_i + 0.5) * stride
        x1 = -narrow(d, 0, 0, 1).reshape(p) + cx
        y1 = -narrow(d, 0, 1, 1).reshape(p) + cy
        x2 = narrow(d, 0, 2, 1).reshape(p) + cx
        y2 = narrow(d, 0, 3, 1).reshape(p) + cy
        gx1, gy1, gx2, gy2 = (lt.boxes[:, c] for c in range(4))
        iw = maximum(minimum(x2, gx2) - maximum(x1, gx1), 0.0)
        ih = maximum(minimum(y2, gy2) - maximum(y1, gy1), 0.0)
        inter = iw * ih
        pred_area = (x2 - x1) * (y2 - y1)
        gt_area = (gx2 - gx1) * (gy2 - gy1)
        union = pred_area - inter + gt_area
        bterm = tsum(-(inter / union) + 1.0)
        box_sum = bterm if box_sum is None else box_sum + bterm

    total = obj_sum * (w_obj / total_cells)
    parts = {"objectness": float(obj_sum.data) / total_cells, "class": 0.0, "box": 0.0,
             "num_pos": n_pos}
    if cls_sum is not None:
        total = total + cls_sum * (w_cls * norm)
        parts["class"] = float(cls_sum.data) * norm
    if box_sum is not None:
        total = total + box_sum * (w_box * norm)
        parts["box"] = float(box_sum.data) * norm
    parts["total"] = float(total.data)
    return total, parts


def decode_boxes(pred: HeadOutput, score_thresh: float) -> list[Detection]:
    """Per-cell detections: score = sigmoid(obj) * max_k sigmoid(cls_k), box
    from exp-transformed distances around the cell center, clamped to the
    image; cells scoring below the threshold are dropped."""
    ih, iw = pred.image_size
    out = []
    for lp, stride in zip(pred.levels, pred.strides):
        obj = 1.0 / (1.0 + np.exp(-lp.obj.data[0]))
        cls = 1.0 / (1.0 + np.exp(-lp.cls.data))
        best_k = cls.argmax(axis=0)
        score = obj * cls.max(axis=0)
        keep_i, keep_j = np.nonzero(score >= score_thresh)
        if keep_i.size == 0:
            continue
        d = np.exp(np.clip(lp.box.data.astype(np.float64), _MIN_LOG_EXTENT, _MAX_LOG_EXTENT))
        for i, j in zip(keep_i.tolist(), keep_j.tolist()):
            cx = (j + 0.5) * stride
            cy = (i + 0.5) * stride
            box = (max(cx - d[0, i, j], 0.0), max(cy - d[1, i, j], 0.0),
                   min(cx + d[2, i, j], float(iw)), min(cy + d[3, i, j], float(ih)))
            out.append(Detection(class_id=int(best_k[i, j]), score=float(score[i, j]), box=box))
    return out


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy class-wise suppression: keep by descending score (ties broken by
    original index), drop boxes overlapping a kept one with IoU strictly above
    the threshold."""
    kept: list[Detection] = []
    by_class: dict[int, list[tuple[int, Detection]]] = {}
    for idx, det in enumerate(dets):
        by_class.setdefault(det.class_id, []).append((idx, det))
    for cid in sorted(by_class):
        cand = sorted(by_class[cid], key=lambda t: (-t[1].score, t[0]))
        chosen: list[Detection] = []
        for _, det in cand:
            if all(iou(det.box, k.box) <= iou_threshold for k in chosen):
                chosen.append(det)
        kept.extend(chosen)
    return kept
