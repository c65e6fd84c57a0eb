"""Cross-level fusion: mixed feature assembly, hypergraph enhancement, and the
bottom-up pathway producing the three head levels.

All five backbone levels are resized to a common grid and concatenated into a
mixed feature whose grid cells act as hypergraph vertices. The convolved
result is projected per level and fused with B3..B5 (concat + 1x1, with
stride-2 downsampling between levels) into N1..N3 at strides 8/16/32.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import (Tensor, concat_channels, conv2d, reshape,
                       resize_nearest, transpose2d)
from .backbone import FeaturePyramid, _conv_pair
from .hypergraph import (Hypergraph, HyperConvParams, adaptive_lambda,
                         build_hypergraph, hyperconv_matrix)
from .params import ModelParams

GRID_STRIDES = (8, 16, 32)
HEAD_STRIDES = (8, 16, 32)


@dataclass
class MixedFeature:
    """Concatenated multi-level feature on the fusion grid."""

    x: Tensor  # [sum(C_i), H_g, W_g]
    grid_stride: int

    @property
    def num_vertices(self) -> int:
        return self.x.shape[1] * self.x.shape[2]

    def vertex_matrix(self) -> Tensor:
        """[H_g*W_g, C] view of the grid cells as hypergraph vertices."""
        c, h, w = self.x.shape
        return transpose2d(reshape(self.x, (c, h * w)))


@dataclass
class HyperFeature:
    """Hypergraph-convolved mixed feature, same shape as its input."""

    x: Tensor
    hypergraph: Hypergraph
    lam: float


@dataclass
class FusionParams:
    enabled: bool
    hyper: Optional[HyperConvParams]               # shared transform
    proj: Optional[list[tuple[Tensor, Tensor]]]    # per-level 1x1 on the hyper feature
    fuse: list[tuple[Tensor, Tensor]]              # per-level concat + 1x1
    down: list[tuple[Tensor, Tensor]]              # two stride-2 3x3 convs
    head_width: int


def init_fusion(mp: ModelParams, channels, head_width: int, rng: np.random.Generator,
                dtype, enabled: bool = True) -> FusionParams:
    """Create fusion weights under the ``fusion.`` prefix.

    The hypergraph transform starts at zero so the convolution begins as the
    residual identity; projection and fuse convolutions use the standard init.
    """
    csum = int(sum(channels))
    wh = int(head_width)
    hyper = proj = None
    extra = 0
    if enabled:
        theta = mp.add("fusion.theta", Tensor(np.zeros((csum, csum), dtype=dtype), requires_grad=True))
        hyper = HyperConvParams(theta=theta)
        proj = [_conv_pair(mp, f"fusion.proj{i}", wh, csum, 1, rng, dtype) for i in (1, 2, 3)]
        extra = wh
    fuse = []
    for i, c in enumerate(channels[2:], start=1):
        cin = c + extra + (wh if i > 1 else 0)
        fuse.append(_conv_pair(mp, f"fusion.fuse{i}", wh, cin, 1, rng, dtype))
    down = [_conv_pair(mp, f"fusion.down{i}", wh, wh, 3, rng, dtype) for i in (1, 2)]
    return FusionParams(enabled=enabled, hyper=hyper, proj=proj, fuse=fuse, down=down, head_width=wh)


def assemble_mixed_feature(pyr: FeaturePyramid, grid_stride: int = 16) -> MixedFeature:
    """Resize B1..B5 to the fusion grid and concatenate along channels."""
    if grid_stride not in GRID_STRIDES:
        raise ValueError(f"grid_stride must be one of {GRID_STRIDES}, got {grid_stride}")
    b1 = pyr.levels[0]
    h0, w0 = b1.shape[1] * pyr.strides[0], b1.shape[2] * pyr.strides[0]
    hg, wg = h0 // grid_stride, w0 // grid_stride
    resized = [resize_nearest(t, hg, wg) for t in pyr.levels]
    return MixedFeature(x=concat_channels(resized), grid_stride=grid_stride)


def apply_hypergraph_fusion(xm: MixedFeature, params: HyperConvParams,
                            lambda_quantile: float = 0.1, *,
                            append_coords: bool = False,
                            lambda_fixed: Optional[float] = None,
                            hypergraph: Optional[Hypergraph] = None) -> HyperFeature:
    """Convolve grid-cell features over a distance-threshold hypergraph.

    Hyperedge construction is structural (no gradient flows through it). A
    prebuilt ``hypergraph`` can be supplied to freeze the structure, which
    gradient checks use to keep the function smooth around a point.
    """
    c, h, w = xm.x.shape
    verts = xm.vertex_matrix()
    if hypergraph is None:
        feats = verts.data
        if append_coords:
            yy, xx = np.divmod(np.arange(h * w), w)
            coords = np.stack([xx / max(w - 1, 1), yy / max(h - 1, 1)], axis=1).astype(feats.dtype)
            feats = np.concatenate([feats, coords], axis=1)
        lam = float(lambda_fixed) if lambda_fixed is not None else adaptive_lambda(feats, lambda_quantile)
        hypergraph = build_hypergraph(feats, lam)
    out = hyperconv_matrix(verts, hypergraph, params)
    back = reshape(transpose2d(out), (c, h, w))
    return HyperFeature(x=back, hypergraph=hypergraph, lam=float(hypergraph.lam))


def bottom_up_fuse(xh: Optional[HyperFeature], pyr: FeaturePyramid,
                   fp: FusionParams) -> tuple[Tensor, Tensor, Tensor]:
    """Fuse (B3, B4, B5), the downsampled previous level, and the projected
    hyper feature into N1..N3 at strides 8/16/32."""
    b3, b4, b5 = pyr.levels[2], pyr.levels[3], pyr.levels[4]
    projected = [None, None, None]
    if fp.enabled:
        if xh is None:
            raise ValueError("fusion is enabled but no hyper feature was supplied")
        for i, (level, (w, b)) in enumerate(zip((b3, b4, b5), fp.proj)):
            p = conv2d(xh.x, w, b)
            projected[i] = resize_nearest(p, level.shape[1], level.shape[2])

    def fuse(parts, i):
        parts = [p for p in parts if p is not None]
        x = parts[0] if len(parts) == 1 else concat_channels(parts)
        return conv2d(x, fp.fuse[i][0], fp.fuse[i][1])

    n1 = fuse([b3, projected[0]], 0)
    d1 = conv2d(n1, fp.down[0][0], fp.down[0][1], stride=2, padding=1)
    n2 = fuse([b4, d1, projected[1]], 1)
    d2 = conv2d(n2, fp.down[1][0], fp.down[1][1], stride=2, padding=1)
    n3 = fuse([b5, d2, projected[2]], 2)
    return n1, n2, n3
