"""COCO-style detection metrics: AP over IoU 0.50:0.05:0.95, AP at 0.5, and
average recall with at most 100 detections per image.

Average precision uses 101-point interpolation: the mean over recall points
{0, 0.01, ..., 1} of the maximum precision at or beyond each recall. Classes
without ground truth are excluded from the means.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .boxes import Detection, GroundTruthBox, iou

COCO_IOU_THRESHOLDS = tuple(0.5 + 0.05 * i for i in range(10))
RECALL_POINTS = np.arange(101) / 100.0  # exact i/100 doubles, not linspace rounding
MAX_DETECTIONS_PER_IMAGE = 100


@dataclass
class EvalResult:
    ap: float
    ap50: float
    ar: float
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"ap": self.ap, "ap50": self.ap50, "ar": self.ar,
                "per_class": {str(k): v for k, v in self.per_class.items()}}


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                     iou_t: float) -> tuple[list[bool], list[bool]]:
    """Greedy single-image, single-class matching.

    Detections are visited in descending score (ties by original index); each
    claims the unmatched ground truth of highest IoU at or above the
    threshold. Returns TP flags aligned with the input detections and matched
    flags aligned with the ground truths.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    tp = [False] * len(dets)
    matched = [False] * len(gts)
    for di in order:
        best_iou = 0.0
        best_gi = -1
        for gi, gt in enumerate(gts):
            if matched[gi]:
                continue
            v = iou(dets[di].box, gt.box)
            if v >= iou_t and v > best_iou:
                best_iou = v
                best_gi = gi
        if best_gi >= 0:
            matched[best_gi] = True
            tp[di] = True
    return tp, matched


def average_precision(flags: Sequence[bool], scores: Sequence[float], n_gt: int) -> float:
    """101-point interpolated AP from pooled TP flags and scores."""
    if n_gt <= 0:
        return 0.0
    if not flags:
        return 0.0
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores, dtype=np.float64)))
    tp = np.asarray(flags, dtype=np.float64)[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # running max of precision from the high-recall end
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in RECALL_POINTS:
        idx = np.searchsorted(recall, r, side="left")
        ap += interp[idx] if idx < len(interp) else 0.0
    return float(ap / len(RECALL_POINTS))


def evaluate(predictions: Mapping[object, Sequence[Detection]],
             ground_truths: Mapping[object, Sequence[GroundTruthBox]],
             iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
             max_dets: int = MAX_DETECTIONS_PER_IMAGE) -> EvalResult:
    """Dataset metrics over matching image ids.

    Detections are truncated per image to the top ``max_dets`` by score before
    class-wise pooling. AP/AR are averaged over the IoU thresholds and over
    classes that have at least one ground truth; AP.5 uses only IoU 0.5.
    """
    for img_id in predictions:
        if img_id not in ground_truths:
            raise KeyError(f"predictions reference unknown image id: {img_id!r}")
    image_ids = sorted(ground_truths.keys(), key=repr)
    classes = sorted({gt.class_id for gts in ground_truths.values() for gt in gts})

    trimmed: dict[object, list[Detection]] = {}
    for img_id in image_ids:
        dets = list(predictions.get(img_id, ()))
        order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))[:max_dets]
        trimmed[img_id] = [dets[i] for i in sorted(order)]

    per_class: dict[int, dict[str, float]] = {}
    ap_all, ap50_all, ar_all = [], [], []
    for cid in classes:
        n_gt = sum(sum(1 for g in ground_truths[i] if g.class_id == cid) for i in image_ids)
        if n_gt == 0:
            continue
        def ap_and_recall_at(t: float) -> tuple[float, float]:
            flags: list[bool] = []
            scores: list[float] = []
            n_matched = 0
            for img_id in image_ids:
                dets = [d for d in trimmed[img_id] if d.class_id == cid]
                gts = [g for g in ground_truths[img_id] if g.class_id == cid]
                tp, matched = match_detections(dets, gts, t)
                flags.extend(tp)
                scores.extend(d.score for d in dets)
                n_matched += sum(matched)
            return average_precision(flags, scores, n_gt), n_matched / n_gt

        aps, recalls = zip(*(ap_and_recall_at(t) for t in iou_thresholds))
        idx50 = next((i for i, t in enumerate(iou_thresholds) if abs(t - 0.5) < 1e-9), None)
        cls_ap = float(np.mean(aps))
        cls_ap50 = aps[idx50] if idx50 is not None else ap_and_recall_at(0.5)[0]
        cls_ar = float(np.mean(recalls))
        per_class[cid] = {"ap": cls_ap, "ap50": cls_ap50, "ar": cls_ar}
        ap_all.append(cls_ap)
        ap50_all.append(cls_ap50)
        ar_all.append(cls_ar)

    if not ap_all:
        return EvalResult(ap=0.0, ap50=0.0, ar=0.0, per_class={})
    return EvalResult(ap=float(np.mean(ap_all)), ap50=float(np.mean(ap50_all)),
                      ar=float(np.mean(ar_all)), per_class=per_class)


def class_pr_data(predictions: Mapping[object, Sequence[Detection]],
                  ground_truths: Mapping[object, Sequence[GroundTruthBox]],
                  iou_t: float = 0.5,
                  max_dets: int = MAX_DETECTIONS_PER_IMAGE) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Recall/precision points per class at one IoU threshold, for plotting."""
    image_ids = sorted(ground_truths.keys(), key=repr)
    classes = sorted({gt.class_id for gts in ground_truths.values() for gt in gts})
    curves: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for cid in classes:
        flags: list[bool] = []
        scores: list[float] = []
        n_gt = 0
        for img_id in image_ids:
            dets = list(predictions.get(img_id, ()))
            order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))[:max_dets]
            dets = [dets[i] for i in sorted(order) if dets[i].class_id == cid]
            gts = [g for g in ground_truths[img_id] if g.class_id == cid]
            n_gt += len(gts)
            tp, _ = match_detections(dets, gts, iou_t)
            flags.extend(tp)
            scores.extend(d.score for d in dets)
        if n_gt == 0 or not flags:
            curves[cid] = (np.zeros(1), np.zeros(1))
            continue
        order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
        tp = np.asarray(flags, dtype=np.float64)[order]
        cum_tp = np.cumsum(tp)
        cum_fp = np.cumsum(1.0 - tp)
        curves[cid] = (cum_tp / n_gt, cum_tp / (cum_tp + cum_fp))
    return curves
