"""Five-level feature extractor with parallel convolution branches per stage.

Each stage fuses a 1x1 recalibration branch, a deformable 3x3 branch, and a
split-bottleneck branch by elementwise sum, applies the activation, and
compresses with a final 1x1 convolution. The stem is a single 3x3 stride-2
convolution producing the stride-2 level; stages 2..5 each enter through a
stride-2 convolution, so level i sits at stride 2**i.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import (ShapeError, Tensor, concat_channels, conv2d,
                       deform_conv2d, kaiming_uniform, narrow, silu)
from .params import ModelParams

STRIDES = (2, 4, 8, 16, 32)


@dataclass
class FeaturePyramid:
    """Backbone levels B1..B5 at strides 2, 4, 8, 16, 32."""

    levels: list[Tensor]
    strides: tuple[int, ...] = STRIDES

    def __post_init__(self):
        if len(self.levels) != 5:
            raise ShapeError(f"feature pyramid needs exactly 5 levels, got {len(self.levels)}")
        for prev, cur in zip(self.levels, self.levels[1:]):
            if cur.shape[1] != prev.shape[1] // 2 or cur.shape[2] != prev.shape[2] // 2:
                raise ShapeError("feature pyramid levels must halve spatial extents")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(t.shape[0] for t in self.levels)


@dataclass
class MLFBlockParams:
    """Weights of one stage; branch tensors are views into the model params."""

    entry: Optional[tuple[Tensor, Tensor]]  # stride-2 entry conv, absent for stage 1
    br1: Optional[tuple[Tensor, Tensor]]    # 1x1 recalibration branch
    dcn: Optional[tuple[Tensor, Tensor]]    # deformable 3x3 branch
    off: Optional[tuple[Tensor, Tensor]]    # offset predictor, zero initialized
    bt1: tuple[Tensor, Tensor]              # split-bottleneck 3x3 #1
    bt2: tuple[Tensor, Tensor]              # split-bottleneck 3x3 #2
    fuse: tuple[Tensor, Tensor]             # post-concat 1x1
    compress: tuple[Tensor, Tensor]         # final 1x1
    mlf_enabled: bool = True
    use_deform: bool = True


@dataclass
class BackboneParams:
    stem: tuple[Tensor, Tensor]
    stages: list[MLFBlockParams]
    channels: tuple[int, ...]


def _conv_pair(mp: ModelParams, name: str, cout: int, cin: int, k: int,
               rng: np.random.Generator, dtype, zero: bool = False) -> tuple[Tensor, Tensor]:
    if zero:
        w = np.zeros((cout, cin, k, k), dtype=dtype)
    else:
        w = kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, dtype)
    wt = mp.add(f"{name}.w", Tensor(w, requires_grad=True))
    bt = mp.add(f"{name}.b", Tensor(np.zeros(cout, dtype=dtype), requires_grad=True))
    return wt, bt


def init_backbone(mp: ModelParams, channels, rng: np.random.Generator, dtype,
                  mlf_enabled: bool = True, use_deform: bool = True) -> BackboneParams:
    """Create backbone weights under the ``backbone.`` prefix."""
    channels = tuple(int(c) for c in channels)
    if len(channels) != 5:
        raise ValueError(f"backbone needs 5 channel widths, got {channels}")
    if any(c % 2 for c in channels):
        raise ValueError(f"channel widths must be even for the split branch, got {channels}")
    stem = _conv_pair(mp, "backbone.stem", channels[0], 3, 3, rng, dtype)
    stages = []
    cin = channels[0]
    for i, c in enumerate(channels, start=1):
        pre = f"backbone.s{i}"
        entry = None if i == 1 else _conv_pair(mp, f"{pre}.entry", c, cin, 3, rng, dtype)
        br1 = dcn = off = None
        if mlf_enabled:
            br1 = _conv_pair(mp, f"{pre}.br1", c, c, 1, rng, dtype)
            dcn = _conv_pair(mp, f"{pre}.dcn", c, c, 3, rng, dtype)
            off = _conv_pair(mp, f"{pre}.off", 18, c, 3, rng, dtype, zero=True)
        half = c // 2
        stages.append(MLFBlockParams(
            entry=entry,
            br1=br1,
            dcn=dcn,
            off=off,
            bt1=_conv_pair(mp, f"{pre}.bt1", half, half, 3, rng, dtype),
            bt2=_conv_pair(mp, f"{pre}.bt2", half, half, 3, rng, dtype),
            fuse=_conv_pair(mp, f"{pre}.fuse", c, c, 1, rng, dtype),
            compress=_conv_pair(mp, f"{pre}.compress", c, c, 1, rng, dtype),
            mlf_enabled=mlf_enabled,
            use_deform=use_deform,
        ))
        cin = c
    return BackboneParams(stem=stem, stages=stages, channels=channels)


def _split_bottleneck(x: Tensor, p: MLFBlockParams) -> Tensor:
    c = x.shape[0]
    half = c // 2
    keep = narrow(x, 0, 0, half)
    y = conv2d(narrow(x, 0, half, c - half), p.bt1[0], p.bt1[1], padding=1)
    y = conv2d(silu(y), p.bt2[0], p.bt2[1], padding=1)
    return conv2d(concat_channels([keep, y]), p.fuse[0], p.fuse[1])


def mlf_block(x: Tensor, p: MLFBlockParams, downsample: bool) -> Tensor:
    """One stage: optional stride-2 entry, parallel branches, silu, 1x1 compress."""
    if downsample:
        if p.entry is None:
            raise ShapeError("downsampling block has no entry convolution")
        x = silu(conv2d(x, p.entry[0], p.entry[1], stride=2, padding=1))
    branches = _split_bottleneck(x, p)
    if p.mlf_enabled:
        b1 = conv2d(x, p.br1[0], p.br1[1])
        if p.use_deform:
            off = conv2d(x, p.off[0], p.off[1], padding=1)
            b2 = deform_conv2d(x, p.dcn[0], off, p.dcn[1])
        else:
            b2 = conv2d(x, p.dcn[0], p.dcn[1], padding=1)
        branches = b1 + b2 + branches
    return conv2d(silu(branches), p.compress[0], p.compress[1])


def backbone_forward(image: Tensor, bp: BackboneParams) -> FeaturePyramid:
    """Run the stem and five stages, returning levels B1..B5."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"backbone expects a [3,H,W] image, got {image.shape}")
    h, w = image.shape[1:]
    if h % 32 or w % 32:
        raise ShapeError(f"image extents must be divisible by 32, got {h}x{w}")
    x = silu(conv2d(image, bp.stem[0], bp.stem[1], stride=2, padding=1))
    levels = []
    for i, stage in enumerate(bp.stages):
        x = mlf_block(x, stage, downsample=(i > 0))
        levels.append(x)
    return FeaturePyramid(levels)
