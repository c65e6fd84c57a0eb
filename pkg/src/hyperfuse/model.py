"""The assembled detector: backbone, optional hypergraph fusion, and head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .backbone import BackboneParams, FeaturePyramid, backbone_forward, init_backbone
from .boxes import Detection, GroundTruthBox
from .fusion import (FusionParams, HyperFeature, MixedFeature,
                     apply_hypergraph_fusion, assemble_mixed_feature,
                     bottom_up_fuse, init_fusion)
from .head import (HeadOutput, HeadParams, TargetAssignment, assign_targets,
                   decode_boxes, detection_loss, head_forward, init_head, nms)
from .hypergraph import Hypergraph
from .params import ModelParams


@dataclass
class ForwardAux:
    pyramid: FeaturePyramid
    mixed: Optional[MixedFeature]
    hyper: Optional[HyperFeature]


class Detector:
    """Builds the parameter set from a config and runs the forward paths."""

    def __init__(self, cfg: dict, dtype=np.float32, init_seed: Optional[int] = None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        seed = cfg["train"]["seed"] if init_seed is None else init_seed
        rng = np.random.default_rng(seed)
        self.params = ModelParams()
        bcfg, fcfg, hcfg = cfg["backbone"], cfg["fusion"], cfg["head"]
        self.backbone: BackboneParams = init_backbone(
            self.params, bcfg["channels"], rng, self.dtype,
            mlf_enabled=bcfg["mlf_enabled"], use_deform=bcfg["use_deform"])
        self.fusion: FusionParams = init_fusion(
            self.params, bcfg["channels"], hcfg["width"], rng, self.dtype,
            enabled=fcfg["enabled"])
        self.head: HeadParams = init_head(
            self.params, hcfg["width"], hcfg["num_classes"], rng, self.dtype)

    def load_state(self, loaded: ModelParams) -> None:
        """Copy values from a loaded checkpoint into this model's tensors."""
        own = dict(self.params.items())
        if set(own) != set(loaded.names()):
            missing = set(own) ^ set(loaded.names())
            raise ValueError(f"checkpoint does not match model configuration; differing names: {sorted(missing)[:6]}")
        for name, tensor in own.items():
            src = loaded[name].data
            if src.shape != tensor.data.shape:
                raise ValueError(f"checkpoint tensor {name} has shape {src.shape}, expected {tensor.data.shape}")
            tensor.data = src.astype(self.dtype, copy=True)

    def _as_input(self, image) -> Tensor:
        if isinstance(image, Tensor):
            return image
        return Tensor(np.asarray(image, dtype=self.dtype))

    def forward(self, image, frozen_hypergraph: Optional[Hypergraph] = None
                ) -> tuple[HeadOutput, ForwardAux]:
        x = self._as_input(image)
        pyr = backbone_forward(x, self.backbone)
        mixed = hyper = None
        fcfg = self.cfg["fusion"]
        if self.fusion.enabled:
            mixed = assemble_mixed_feature(pyr, fcfg["grid_stride"])
            hyper = apply_hypergraph_fusion(
                mixed, self.fusion.hyper, fcfg["lambda_quantile"],
                append_coords=fcfg["append_coords"],
                lambda_fixed=fcfg["lambda_fixed"],
                hypergraph=frozen_hypergraph)
        ns = bottom_up_fuse(hyper, pyr, self.fusion)
        out = head_forward(ns, self.head)
        return out, ForwardAux(pyramid=pyr, mixed=mixed, hyper=hyper)

    def targets_for(self, gts: Sequence[GroundTruthBox], pred: HeadOutput) -> TargetAssignment:
        shapes = [(lp.obj.shape[1], lp.obj.shape[2]) for lp in pred.levels]
        return assign_targets(gts, pred.image_size, shapes,
                              strides=pred.strides,
                              size_thresholds=tuple(self.cfg["head"]["size_thresholds"]))

    def loss_on(self, image, gts: Sequence[GroundTruthBox],
                frozen_hypergraph: Optional[Hypergraph] = None):
        pred, _ = self.forward(image, frozen_hypergraph=frozen_hypergraph)
        targets = self.targets_for(gts, pred)
        return detection_loss(pred, targets, weights=tuple(self.cfg["head"]["loss_weights"]))

    def predict(self, image, score_thresh: Optional[float] = None,
                nms_iou: Optional[float] = None) -> list[Detection]:
        hcfg = self.cfg["head"]
        thresh = hcfg["score_thresh"] if score_thresh is None else score_thresh
        overlap = hcfg["nms_iou"] if nms_iou is None else nms_iou
        pred, _ = self.forward(image)
        return nms(decode_boxes(pred, thresh), overlap)
