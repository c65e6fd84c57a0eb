"""Report rendering: matplotlib figures written to files alongside delimited
(CSV) and aligned plain-text outputs."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .imageio import chw_float_to_u8  # noqa: E402


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[str(h) for h in header]] + [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for ri, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if ri == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def save_loss_curve(rows: Sequence[dict], path) -> None:
    steps = [r["step"] for r in rows if "loss" in r]
    losses = [r["loss"] for r in rows if "loss" in r]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_title("loss curve")
    ax.grid(alpha=0.3)
    eval_steps = [r["step"] for r in rows if "val_ap50" in r]
    if eval_steps:
        ax2 = ax.twinx()
        ax2.plot(eval_steps, [r["val_ap50"] for r in rows if "val_ap50" in r],
                 color="tab:orange", marker="o", ms=3, lw=1.0)
        ax2.set_ylabel("val AP.5", color="tab:orange")
        ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_pr_curves(curves: dict[int, tuple], class_names: Sequence[str], path) -> None:
    """curves maps class id to (recall array, precision array) at IoU 0.5."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for cid, (rec, prec) in sorted(curves.items()):
        label = class_names[cid] if cid < len(class_names) else f"class {cid}"
        ax.plot(rec, prec, lw=1.4, label=label)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_title("precision-recall at IoU 0.5")
    ax.grid(alpha=0.3)
    if curves:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_ablation_chart(rows: Sequence[Sequence], path) -> None:
    """rows: (name, ap, ap50, ar) per configuration."""
    names = [r[0] for r in rows]
    metrics = ("AP", "AP.5", "AR")
    fig, ax = plt.subplots(figsize=(7, 4))
    x = range(len(names))
    width = 0.25
    for mi, metric in enumerate(metrics):
        vals = [r[1 + mi] for r in rows]
        ax.bar([xi + (mi - 1) * width for xi in x], vals, width, label=metric)
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=15, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("metric value")
    ax.set_title("ablation (median over seeds)")
    ax.grid(axis="y", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_sample_grid(images, path, max_n: int = 9) -> None:
    """Thumbnail grid of annotated images with their boxes."""
    shown = list(images)[:max_n]
    n = len(shown)
    if n == 0:
        return
    cols = min(3, n)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 3 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, im in zip(axes.ravel(), shown):
        ax.imshow(chw_float_to_u8(im.image))
        for gt in im.gts:
            x1, y1, x2, y2 = gt.box
            color = "tab:red" if gt.class_id == 1 else "tab:green"
            ax.add_patch(plt.Rectangle((x1, y1), x2 - x1, y2 - y1,
                                       fill=False, edgecolor=color, lw=1.2))
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_degree_hist(stats: dict, path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for ax, key, title in zip(axes, ("vertex_degree_hist", "edge_degree_hist"),
                              ("vertex degrees", "edge degrees")):
        hist = {int(k): v for k, v in stats[key].items()}
        ax.bar(list(hist.keys()), list(hist.values()))
        ax.set_title(title)
        ax.set_xlabel("degree")
        ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
