"""Synthetic context-dependent cell imagery, sliding-window tiling, and
cross-tile detection stitching.

The generator paints elliptical cells (cytoplasm plus nucleus) on a textured
background. A cell's class is contextual: it is abnormal exactly when its
nucleus radius exceeds a configured ratio of the median nucleus radius among
its spatial neighbors (isolated cells compare against the image-wide median),
so the same absolute nucleus size can be normal in one image and abnormal in
another.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import Detection, GroundTruthBox, shift_box
from .head import nms
from .imageio import chw_float_to_u8, read_image, u8_to_chw_float, write_image

CLASS_NAMES = ("normal", "abnormal")


class DataError(ValueError):
    """Malformed dataset input (annotations, images, or generator config)."""


@dataclass
class CellGeometry:
    cx: float
    cy: float
    nucleus_r: float
    cyto_a: float
    cyto_b: float
    angle: float


@dataclass
class AnnotatedImage:
    """[3,H,W] image in [0,1] (snapped to the 8-bit grid) with its boxes."""

    image: np.ndarray
    gts: list[GroundTruthBox]
    cells: list[CellGeometry] = field(default_factory=list)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]  # (H, W)


@dataclass
class GenConfig:
    image_size: int = 128
    n_cells: tuple[int, int] = (4, 8)
    ratio_threshold: float = 1.3
    neighbor_radius: float = 50.0
    seed: int = 0


def contextual_labels(centers: np.ndarray, nucleus_radii: np.ndarray,
                      ratio_threshold: float, neighbor_radius: float) -> np.ndarray:
    """Label rule: abnormal iff nucleus radius > threshold * median nucleus
    radius of the other cells within the neighbor radius; cells with no
    neighbor compare against the median over every cell in the image."""
    n = len(nucleus_radii)
    labels = np.zeros(n, dtype=np.int64)
    if n == 0:
        return labels
    global_median = float(np.median(nucleus_radii))
    for i in range(n):
        d = np.sqrt(((centers - centers[i]) ** 2).sum(axis=1))
        mask = (d <= neighbor_radius)
        mask[i] = False
        med = float(np.median(nucleus_radii[mask])) if mask.any() else global_median
        labels[i] = 1 if nucleus_radii[i] > ratio_threshold * med else 0
    return labels


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cell: int = 8) -> np.ndarray:
    """Low-frequency noise field in [-1, 1] via bilinear upsampling."""
    gh, gw = h // cell + 2, w // cell + 2
    coarse = rng.uniform(-1.0, 1.0, size=(gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = ys.astype(np.int64)
    x0 = xs.astype(np.int64)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def _paint_ellipse(img: np.ndarray, cx: float, cy: float, a: float, b: float,
                   angle: float, color: np.ndarray) -> None:
    h, w = img.shape[1], img.shape[2]
    ext = max(a, b) + 2.0
    x_lo, x_hi = max(int(cx - ext), 0), min(int(cx + ext) + 1, w)
    y_lo, y_hi = max(int(cy - ext), 0), min(int(cy + ext) + 1, h)
    if x_lo >= x_hi or y_lo >= y_hi:
        return
    ys, xs = np.mgrid[y_lo:y_hi, x_lo:x_hi]
    dx = xs - cx
    dy = ys - cy
    ca, sa = math.cos(angle), math.sin(angle)
    q = ((dx * ca + dy * sa) / a) ** 2 + ((-dx * sa + dy * ca) / b) ** 2
    alpha = np.clip((1.0 - q) * 4.0, 0.0, 1.0)
    patch = img[:, y_lo:y_hi, x_lo:x_hi]
    patch += alpha[None] * (color[:, None, None] - patch)


def gen_synthetic(cfg: GenConfig) -> AnnotatedImage:
    """Render one annotated image, fully determined by the config seed."""
    s = cfg.image_size
    rng = np.random.default_rng(cfg.seed)
    margin = 18
    if s < 2 * margin + 4:
        raise DataError(f"image size {s} too small to place any cell")

    base = np.array([rng.uniform(0.82, 0.90), rng.uniform(0.78, 0.86), rng.uniform(0.84, 0.92)])
    img = np.empty((3, s, s))
    for ch in range(3):
        img[ch] = base[ch] + 0.035 * _smooth_noise(rng, s, s)

    lo, hi = cfg.n_cells
    n_cells = int(rng.integers(lo, hi + 1)) if hi > lo else int(lo)
    # per-image nucleus scale: the wide range makes absolute size ambiguous
    # across images, so the class is only decidable relative to neighbors
    rho = rng.uniform(3.6, 8.4)
    centers: list[tuple[float, float]] = []
    cells: list[CellGeometry] = []
    for _ in range(n_cells):
        placed = None
        for _attempt in range(120):
            cx = rng.uniform(margin, s - margin)
            cy = rng.uniform(margin, s - margin)
            if all((cx - px) ** 2 + (cy - py) ** 2 >= 30.0 ** 2 for px, py in centers):
                placed = (cx, cy)
                break
        if placed is None:
            continue
        centers.append(placed)
        a = rng.uniform(10.0, 15.0)
        b = a * rng.uniform(0.72, 1.0)
        angle = rng.uniform(0.0, math.pi)
        enlarged = rng.random() < 0.3
        u = rng.uniform(1.5, 1.8) if enlarged else rng.uniform(0.8, 1.02)
        cells.append(CellGeometry(cx=placed[0], cy=placed[1], nucleus_r=rho * u,
                                  cyto_a=a, cyto_b=b, angle=angle))

    for cell in cells:
        cyto_color = np.array([0.58, 0.70, 0.86]) + rng.uniform(-0.06, 0.06, size=3)
        nuc_color = np.array([0.36, 0.24, 0.50]) + rng.uniform(-0.05, 0.05, size=3)
        _paint_ellipse(img, cell.cx, cell.cy, cell.cyto_a, cell.cyto_b, cell.angle, cyto_color)
        _paint_ellipse(img, cell.cx, cell.cy, cell.nucleus_r, cell.nucleus_r, 0.0, nuc_color)

    geom = np.array([[c.cx, c.cy] for c in cells]).reshape(-1, 2)
    radii = np.array([c.nucleus_r for c in cells])
    labels = contextual_labels(geom, radii, cfg.ratio_threshold, cfg.neighbor_radius)

    gts = []
    for cell, label in zip(cells, labels):
        ca, sa_ = math.cos(cell.angle), math.sin(cell.angle)
        ex = math.sqrt((cell.cyto_a * ca) ** 2 + (cell.cyto_b * sa_) ** 2)
        ey = math.sqrt((cell.cyto_a * sa_) ** 2 + (cell.cyto_b * ca) ** 2)
        ex = max(ex, cell.nucleus_r)
        ey = max(ey, cell.nucleus_r)
        box = (max(cell.cx - ex, 0.0), max(cell.cy - ey, 0.0),
               min(cell.cx + ex, float(s)), min(cell.cy + ey, float(s)))
        gts.append(GroundTruthBox(class_id=int(label), box=box))

    quantized = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return AnnotatedImage(image=quantized.astype(np.float32), gts=gts, cells=cells)


def gen_dataset(cfg: GenConfig, n_images: int, seed_offset: int = 0) -> list[AnnotatedImage]:
    """Images i get seeds cfg.seed + seed_offset + i, so train/val stay disjoint."""
    out = []
    for i in range(n_images):
        c = GenConfig(image_size=cfg.image_size, n_cells=cfg.n_cells,
                      ratio_threshold=cfg.ratio_threshold,
                      neighbor_radius=cfg.neighbor_radius,
                      seed=cfg.seed + seed_offset + i)
        out.append(gen_synthetic(c))
    return out


# ---------------------------------------------------------------------------
# tiling and stitching


def tile_image(img: AnnotatedImage, window: int = 640, stride: int = 512
               ) -> list[tuple[AnnotatedImage, tuple[int, int]]]:
    """Slide a window of the given stride; the final offset per axis is clamped
    so the window ends at the border. Boxes are kept in the patch whose area
    contains their center (half-open), then clipped to the patch."""
    h, w = img.size
    if window > h or window > w:
        raise DataError(f"window {window} exceeds image extent {h}x{w}")

    def offsets(extent: int) -> list[int]:
        outs = []
        o = 0
        while True:
            if o + window >= extent:
                outs.append(extent - window)
                return outs
            outs.append(o)
            o += stride

    tiles = []
    for oy in offsets(h):
        for ox in offsets(w):
            patch = img.image[:, oy:oy + window, ox:ox + window].copy()
            kept = []
            for gt in img.gts:
                x1, y1, x2, y2 = gt.box
                cx = (x1 + x2) / 2
                cy = (y1 + y2) / 2
                if not (ox <= cx < ox + window and oy <= cy < oy + window):
                    continue
                clipped = (max(x1, ox) - ox, max(y1, oy) - oy,
                           min(x2, ox + window) - ox, min(y2, oy + window) - oy)
                kept.append(GroundTruthBox(class_id=gt.class_id, box=clipped))
            tiles.append((AnnotatedImage(image=patch, gts=kept), (ox, oy)))
    return tiles


def stitch_detections(per_tile: Sequence[tuple[Sequence[Detection], tuple[int, int]]],
                      nms_iou: float = 0.5) -> list[Detection]:
    """Translate detections by their tile offsets, pool, and run class-wise NMS."""
    pooled = []
    for dets, (ox, oy) in per_tile:
        for det in dets:
            pooled.append(Detection(class_id=det.class_id, score=det.score,
                                    box=shift_box(det.box, ox, oy)))
    return nms(pooled, nms_iou)


# ---------------------------------------------------------------------------
# annotation files (JSON lines, one record per image)


def write_annotations(jsonl_path, images: Sequence[AnnotatedImage],
                      image_format: str = "ppm", prefix: str = "img") -> None:
    """Write images next to the JSONL file and one record per line."""
    jsonl_path = Path(jsonl_path)
    jsonl_path.parent.mkdir(parents=True, exist_ok=True)
    with open(jsonl_path, "w", encoding="utf-8") as f:
        for i, im in enumerate(images):
            rel = f"{prefix}_{i:05d}.{image_format}"
            write_image(jsonl_path.parent / rel, chw_float_to_u8(im.image))
            record = {
                "image": rel,
                "boxes": [{"class": gt.class_id,
                           "x1": gt.box[0], "y1": gt.box[1],
                           "x2": gt.box[2], "y2": gt.box[3]} for gt in im.gts],
            }
            f.write(json.dumps(record) + "\n")


def load_annotations(jsonl_path) -> list[AnnotatedImage]:
    """Load and validate a JSONL dataset; failures report the offending line."""
    jsonl_path = Path(jsonl_path)
    if not jsonl_path.exists():
        raise DataError(f"annotations file not found: {jsonl_path}")
    out = []
    with open(jsonl_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{jsonl_path}:{lineno}: malformed JSON: {e}") from None
            rel = record.get("image")
            if not rel:
                raise DataError(f"{jsonl_path}:{lineno}: missing 'image' field")
            img_path = jsonl_path.parent / rel
            if not img_path.exists():
                raise DataError(f"{jsonl_path}:{lineno}: image file not found: {img_path}")
            u8 = read_image(img_path)
            h, w = u8.shape[:2]
            gts = []
            for b in record.get("boxes", []):
                x1, y1, x2, y2 = b["x1"], b["y1"], b["x2"], b["y2"]
                if not (x2 > x1 and y2 > y1):
                    raise DataError(f"{jsonl_path}:{lineno}: degenerate box {b}")
                if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
                    raise DataError(f"{jsonl_path}:{lineno}: box {b} outside {w}x{h} image")
                gts.append(GroundTruthBox(class_id=int(b["class"]), box=(x1, y1, x2, y2)))
            out.append(AnnotatedImage(image=u8_to_chw_float(u8), gts=gts))
    return out
