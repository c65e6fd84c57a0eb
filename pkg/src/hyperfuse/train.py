"""Deterministic training loop: fixed seed in, bit-identical checkpoint out."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tape
from .boxes import Detection
from .data import AnnotatedImage, load_annotations, stitch_detections, tile_image
from .evaluator import EvalResult, evaluate
from .model import Detector
from .params import Adam, save_checkpoint


def predict_image(model: Detector, image: np.ndarray,
                  window: Optional[int] = None, stride: Optional[int] = None) -> list[Detection]:
    """Run the model, tiling when the image exceeds the window size."""
    h, w = image.shape[1], image.shape[2]
    win = window if window is not None else model.cfg["data"]["window"]
    strd = stride if stride is not None else model.cfg["data"]["stride"]
    if h <= win and w <= win:
        return model.predict(image)
    tiles = tile_image(AnnotatedImage(image=image, gts=[]), window=win, stride=strd)
    per_tile = [(model.predict(patch.image), off) for patch, off in tiles]
    return stitch_detections(per_tile, nms_iou=model.cfg["head"]["nms_iou"])


def evaluate_model(model: Detector, images: Sequence[AnnotatedImage],
                   max_dets: int = 100) -> EvalResult:
    preds = {i: predict_image(model, im.image) for i, im in enumerate(images)}
    gts = {i: im.gts for i, im in enumerate(images)}
    return evaluate(preds, gts, max_dets=max_dets)


def run_training(cfg: dict, out_dir, train_set: Optional[list[AnnotatedImage]] = None,
                 val_set: Optional[list[AnnotatedImage]] = None) -> dict:
    """Train from scratch and write checkpoint.ckpt plus metrics.jsonl.

    Returns a summary with the final validation metrics. The metrics log
    embeds the resolved config as its first record and contains nothing
    non-deterministic (no wall-clock times).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_dir = Path(cfg["data"]["dir"])
    if train_set is None:
        train_set = load_annotations(data_dir / "train.jsonl")
    if val_set is None:
        val_set = load_annotations(data_dir / "val.jsonl")
    if not train_set:
        raise ValueError("training set is empty")

    tcfg = cfg["train"]
    dtype = np.float32 if tcfg["dtype"] == "f32" else np.float64
    model = Detector(cfg, dtype=dtype)
    opt = Adam(model.params, lr=tcfg["lr"], beta1=tcfg["beta1"],
               beta2=tcfg["beta2"], eps=tcfg["eps"])
    rng = np.random.default_rng(tcfg["seed"])
    batch = int(tcfg["batch"])
    steps = int(tcfg["steps"])
    log_every = max(1, int(tcfg["log_every"]))
    eval_every = int(tcfg["eval_every"])
    eval_subset = val_set[:int(tcfg["eval_subset"])]

    rows: list[dict] = [{"config": cfg}]
    order: list[int] = []

    def next_batch() -> list[int]:
        nonlocal order
        picked = []
        while len(picked) < batch:
            if not order:
                order = list(rng.permutation(len(train_set)))
            picked.append(order.pop())
        return picked

    warmup = max(0, int(tcfg["warmup_steps"]))
    clip = float(tcfg["grad_clip"])
    avg_frac = float(tcfg["avg_last_frac"])
    avg_from = steps - int(steps * avg_frac) + 1 if avg_frac > 0 else steps + 1
    avg_sum: dict[str, np.ndarray] = {}
    avg_count = 0

    def lr_at(step: int) -> float:
        lr = float(tcfg["lr"])
        if warmup and step < warmup:
            return lr * step / warmup
        if tcfg["lr_schedule"] == "cosine" and steps > warmup:
            progress = (step - warmup) / (steps - warmup)
            floor = float(tcfg["lr_floor"])
            return lr * (floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * progress)))
        return lr
    for step in range(1, steps + 1):
        idxs = next_batch()
        with Tape() as tape:
            total = None
            parts_acc = {"objectness": 0.0, "class": 0.0, "box": 0.0, "num_pos": 0}
            for i in idxs:
                im = train_set[i]
                loss, parts = model.loss_on(im.image, im.gts)
                total = loss if total is None else total + loss
                for k in parts_acc:
                    parts_acc[k] += parts[k]
            total = total * (1.0 / batch)
        tape.backward(total)
        grads = model.params.grads()
        if clip > 0:
            gnorm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if gnorm > clip:
                scale = np.array(clip / gnorm, dtype=dtype)
                grads = {k: g * scale for k, g in grads.items()}
        opt.lr = lr_at(step)
        opt.step(grads)
        model.params.zero_grads()
        if step >= avg_from:
            # Polyak-style tail average; damps the endpoint noise of the run
            avg_count += 1
            for name, t in model.params.items():
                acc = avg_sum.get(name)
                if acc is None:
                    avg_sum[name] = t.data.astype(np.float64)
                else:
                    acc += t.data

        if step == 1 or step % log_every == 0 or step == steps:
            row = {"step": step, "loss": float(total.data)}
            row.update({k: parts_acc[k] / batch for k in ("objectness", "class", "box")})
            row["num_pos"] = parts_acc["num_pos"]
            rows.append(row)
        if eval_every and step % eval_every == 0 and eval_subset:
            res = evaluate_model(model, eval_subset, max_dets=cfg["eval"]["max_dets"])
            rows.append({"step": step, "val_ap50": res.ap50, "val_ap": res.ap, "val_ar": res.ar})

    if avg_count:
        for name, t in model.params.items():
            t.data = (avg_sum[name] / avg_count).astype(dtype)

    final = evaluate_model(model, val_set, max_dets=cfg["eval"]["max_dets"]) if val_set \
        else EvalResult(0.0, 0.0, 0.0)
    rows.append({"step": steps, "final_ap": final.ap, "final_ap50": final.ap50,
                 "final_ar": final.ar})

    ckpt_path = out_dir / "checkpoint.ckpt"
    save_checkpoint(ckpt_path, model.params)
    with open(out_dir / "metrics.jsonl", "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return {
        "checkpoint": str(ckpt_path),
        "metrics": str(out_dir / "metrics.jsonl"),
        "final": {"ap": final.ap, "ap50": final.ap50, "ar": final.ar,
                  "per_class": final.per_class},
        "rows": rows,
    }
