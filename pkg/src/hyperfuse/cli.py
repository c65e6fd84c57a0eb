"""Command-line entry point.

    hyperfuse <subcommand> [--config cfg.json] [--out DIR] [--seed N] [--section.key value ...]

Dotted-key overrides update any documented config value, e.g.
``--train.steps 500`` or ``--fusion.enabled false``. Exit codes: 0 success,
1 check failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import statistics
import sys
from pathlib import Path

import numpy as np

from . import reports
from .boxes import Detection
from .config import ConfigError, load_config
from .data import (CLASS_NAMES, DataError, GenConfig, gen_dataset,
                   load_annotations, tile_image, write_annotations)
from .evaluator import class_pr_data, evaluate
from .hypergraph import adaptive_lambda, build_hypergraph
from .imageio import (chw_float_to_u8, draw_box, read_image, u8_to_chw_float,
                      write_image)
from .model import Detector
from .params import load_checkpoint
from .train import predict_image, run_training

ABLATION_CELLS = (
    ("baseline", False, False),
    ("+MLF-SNet", True, False),
    ("+CLFFS-HC", False, True),
    ("+MLF-SNet and CLFFS-HC", True, True),
)


def _split_overrides(extra: list[str]) -> list[tuple[str, str]]:
    overrides = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument: {tok} (overrides look like --section.key value)")
        if "=" in tok:
            key, val = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for override {tok}")
            key, val = tok[2:], extra[i + 1]
            i += 2
        overrides.append((key, val))
    return overrides


def _resolve_config(args, extra: list[str], seed_key: str = "train.seed") -> dict:
    overrides = _split_overrides(extra)
    if getattr(args, "seed", None) is not None:
        overrides.append((seed_key, str(args.seed)))
    return load_config(args.config, overrides)


def _write_manifest(out_dir: Path, command: str, cfg: dict, artifacts: list[str]) -> None:
    manifest = {"command": command, "config": cfg, "artifacts": sorted(artifacts)}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True),
                                           encoding="utf-8")


def _gen_config(dcfg: dict) -> GenConfig:
    rule = dcfg["abnormal_rule"]
    return GenConfig(image_size=dcfg["image_size"], n_cells=tuple(dcfg["n_cells"]),
                     ratio_threshold=rule["ratio_threshold"],
                     neighbor_radius=rule["neighbor_radius"], seed=dcfg["seed"])


def cmd_gen(args, extra) -> int:
    cfg = _resolve_config(args, extra, seed_key="data.seed")
    dcfg = cfg["data"]
    out_dir = reports.ensure_dir(args.out or dcfg["dir"])
    gc = _gen_config(dcfg)
    train = gen_dataset(gc, dcfg["train_images"])
    val = gen_dataset(gc, dcfg["val_images"], seed_offset=dcfg["train_images"])
    fmt = dcfg["image_format"]
    write_annotations(out_dir / "train.jsonl", train, image_format=fmt, prefix="train")
    write_annotations(out_dir / "val.jsonl", val, image_format=fmt, prefix="val")
    rows = []
    for split, images in (("train", train), ("val", val)):
        for i, im in enumerate(images):
            n_ab = sum(1 for g in im.gts if g.class_id == 1)
            rows.append((split, i, len(im.gts), n_ab))
    reports.write_csv(out_dir / "stats.csv", ("split", "index", "cells", "abnormal"), rows)
    reports.save_sample_grid(val, out_dir / "samples.png")
    _write_manifest(out_dir, "gen", cfg,
                    ["train.jsonl", "val.jsonl", "stats.csv", "samples.png"])
    total = sum(r[2] for r in rows)
    abnormal = sum(r[3] for r in rows)
    print(f"generated {len(train)} train / {len(val)} val images under {out_dir} "
          f"({total} cells, {abnormal} abnormal)")
    return 0


def cmd_train(args, extra) -> int:
    cfg = _resolve_config(args, extra)
    out_dir = reports.ensure_dir(args.out or "runs/train")
    summary = run_training(cfg, out_dir)
    rows = summary["rows"]
    reports.save_loss_curve(rows, out_dir / "loss_curve.png")
    step_rows = [(r["step"], r["loss"], r["objectness"], r["class"], r["box"], r["num_pos"])
                 for r in rows if "loss" in r]
    reports.write_csv(out_dir / "metrics.csv",
                      ("step", "loss", "objectness", "class", "box", "num_pos"), step_rows)
    (out_dir / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True),
                                                  encoding="utf-8")
    _write_manifest(out_dir, "train", cfg,
                    ["checkpoint.ckpt", "metrics.jsonl", "metrics.csv",
                     "loss_curve.png", "resolved_config.json"])
    final = summary["final"]
    print(f"trained {cfg['train']['steps']} steps; "
          f"val AP {final['ap']:.4f}  AP.5 {final['ap50']:.4f}  AR {final['ar']:.4f}")
    print(f"checkpoint: {summary['checkpoint']}")
    return 0


def _load_model(cfg: dict, ckpt_path) -> Detector:
    dtype = np.float32 if cfg["train"]["dtype"] == "f32" else np.float64
    model = Detector(cfg, dtype=dtype)
    model.load_state(load_checkpoint(ckpt_path))
    return model


def cmd_eval(args, extra) -> int:
    cfg = _resolve_config(args, extra)
    out_dir = reports.ensure_dir(args.out or "runs/eval")
    images = load_annotations(Path(cfg["data"]["dir"]) / f"{args.split}.jsonl")
    model = _load_model(cfg, args.ckpt)
    preds = {i: predict_image(model, im.image) for i, im in enumerate(images)}
    gts = {i: im.gts for i, im in enumerate(images)}
    result = evaluate(preds, gts, max_dets=cfg["eval"]["max_dets"])
    (out_dir / "results.json").write_text(json.dumps(result.as_dict(), indent=2, sort_keys=True),
                                          encoding="utf-8")
    header = ("class", "ap", "ap50", "ar")
    rows = [(CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c),
             v["ap"], v["ap50"], v["ar"]) for c, v in sorted(result.per_class.items())]
    rows.append(("all", result.ap, result.ap50, result.ar))
    table = reports.format_table(header, rows)
    (out_dir / "results.txt").write_text(table, encoding="utf-8")
    reports.write_csv(out_dir / "results.csv", header, rows)
    reports.save_pr_curves(class_pr_data(preds, gts, max_dets=cfg["eval"]["max_dets"]),
                           CLASS_NAMES, out_dir / "pr_curves.png")
    _write_manifest(out_dir, "eval", cfg,
                    ["results.json", "results.txt", "results.csv", "pr_curves.png"])
    print(table, end="")
    return 0


def cmd_infer(args, extra) -> int:
    cfg = _resolve_config(args, extra)
    out_dir = reports.ensure_dir(args.out or "runs/infer")
    inputs: list[tuple[str, np.ndarray]] = []
    path = Path(args.input)
    if path.suffix == ".jsonl":
        for i, im in enumerate(load_annotations(path)):
            inputs.append((f"{i:05d}", im.image))
    else:
        inputs.append((path.stem, u8_to_chw_float(read_image(path))))
    model = _load_model(cfg, args.ckpt)
    csv_rows = []
    with open(out_dir / "detections.jsonl", "w", encoding="utf-8") as f:
        for name, image in inputs:
            dets = predict_image(model, image)
            record = {"image": name,
                      "detections": [{"class": d.class_id, "score": d.score,
                                      "x1": d.box[0], "y1": d.box[1],
                                      "x2": d.box[2], "y2": d.box[3]} for d in dets]}
            f.write(json.dumps(record) + "\n")
            csv_rows.extend((name, d.class_id, d.score, *d.box) for d in dets)
    reports.write_csv(out_dir / "detections.csv",
                      ("image", "class", "score", "x1", "y1", "x2", "y2"), csv_rows)
    _write_manifest(out_dir, "infer", cfg, ["detections.jsonl", "detections.csv"])
    print(f"wrote detections for {len(inputs)} image(s) to {out_dir}")
    return 0


def cmd_tile(args, extra) -> int:
    cfg = _resolve_config(args, extra)
    out_dir = reports.ensure_dir(args.out or "runs/tile")
    from .data import AnnotatedImage
    if args.data:
        images = load_annotations(args.data)
        if not (0 <= args.index < len(images)):
            raise DataError(f"--index {args.index} out of range for {len(images)} images")
        src = images[args.index]
    else:
        src = AnnotatedImage(image=u8_to_chw_float(read_image(args.image)), gts=[])
    window, stride = cfg["data"]["window"], cfg["data"]["stride"]
    tiles = tile_image(src, window=window, stride=stride)
    fmt = cfg["data"]["image_format"]
    write_annotations(out_dir / "tiles.jsonl", [p for p, _ in tiles],
                      image_format=fmt, prefix="tile")
    patches = [(f"tile_{k:05d}.{fmt}", ox, oy, len(patch.gts))
               for k, (patch, (ox, oy)) in enumerate(tiles)]
    reports.write_csv(out_dir / "offsets.csv", ("tile", "x", "y", "boxes"), patches)
    import matplotlib.pyplot as plt
    h, w = src.size
    fig, ax = plt.subplots(figsize=(5, 5 * h / w))
    ax.imshow(chw_float_to_u8(src.image))
    for _, ox, oy, _n in patches:
        ax.add_patch(plt.Rectangle((ox, oy), window, window, fill=False,
                                   edgecolor="tab:blue", lw=1.0))
    ax.set_title(f"{len(patches)} windows of {window}px, stride {stride}")
    fig.tight_layout()
    fig.savefig(out_dir / "layout.png", dpi=110)
    plt.close(fig)
    _write_manifest(out_dir, "tile", cfg, ["tiles.jsonl", "offsets.csv", "layout.png"])
    print(f"wrote {len(patches)} tiles to {out_dir}")
    return 0


def cmd_render(args, extra) -> int:
    cfg = _resolve_config(args, extra)
    out_dir = reports.ensure_dir(args.out or "runs/render")
    images = load_annotations(args.data)
    dets_by_image: dict[str, list[Detection]] = {}
    if args.detections:
        with open(args.detections, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                rec = json.loads(line)
                dets_by_image[rec["image"]] = [
                    Detection(class_id=d["class"], score=d["score"],
                              box=(d["x1"], d["y1"], d["x2"], d["y2"]))
                    for d in rec["detections"]]
    fmt = cfg["data"]["image_format"]
    names = []
    for i, im in enumerate(images):
        name = f"{i:05d}"
        u8 = chw_float_to_u8(im.image)
        if not args.no_gt:
            for gt in im.gts:
                draw_box(u8, gt.box, (40, 200, 40) if gt.class_id == 0 else (240, 170, 40))
        for det in dets_by_image.get(name, []):
            draw_box(u8, det.box, (220, 40, 40))
        fname = f"render_{name}.{fmt}"
        write_image(out_dir / fname, u8)
        names.append(fname)
    _write_manifest(out_dir, "render", cfg, names)
    print(f"rendered {len(names)} image(s) to {out_dir}")
    return 0


def cmd_hg_debug(args, extra) -> int:
    cfg = _resolve_config(args, extra)
    path = Path(args.features)
    if path.suffix == ".npy":
        feats = np.load(path)
    else:
        feats = np.asarray(json.loads(path.read_text(encoding="utf-8")), dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    lam = args.lam if args.lam is not None else adaptive_lambda(
        feats, cfg["fusion"]["lambda_quantile"])
    hg = build_hypergraph(feats, lam)
    stats = hg.stats()
    print(json.dumps(stats, indent=2, sort_keys=True))
    if args.out:
        out_dir = reports.ensure_dir(args.out)
        (out_dir / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True),
                                            encoding="utf-8")
        reports.save_degree_hist(stats, out_dir / "degree_hist.png")
        _write_manifest(out_dir, "hg-debug", cfg, ["stats.json", "degree_hist.png"])
    return 0


def cmd_gradcheck(args, extra) -> int:
    _resolve_config(args, extra)  # validates overrides; the suite pins its own shapes
    from .gradcheck import run_suite
    results = run_suite()
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.name}: max rel err {r.max_err:.3e}")
        failed += 0 if r.passed else 1
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return 1 if failed else 0


def _ablate_run(task: tuple[dict, str]) -> dict:
    cfg, out_dir = task
    return run_training(cfg, out_dir)["final"]


def cmd_ablate(args, extra) -> int:
    cfg = _resolve_config(args, extra)
    out_dir = reports.ensure_dir(args.out or "runs/ablate")
    data_dir = Path(cfg["data"]["dir"])
    if not (data_dir / "train.jsonl").exists():
        raise DataError(f"no dataset under {data_dir}; run `hyperfuse gen` first")
    n_seeds = int(cfg["ablate"]["n_seeds"])
    workers = int(cfg["ablate"]["workers"])
    base_seed = cfg["train"]["seed"]

    tasks = []
    labels = []
    for name, mlf, fus in ABLATION_CELLS:
        slug = name.replace("+", "plus_").replace(" ", "_").lower()
        for s in range(n_seeds):
            run_cfg = copy.deepcopy(cfg)
            run_cfg["backbone"]["mlf_enabled"] = mlf
            run_cfg["fusion"]["enabled"] = fus
            run_cfg["train"]["seed"] = base_seed + s
            tasks.append((run_cfg, str(out_dir / "runs" / f"{slug}_seed{base_seed + s}")))
            labels.append((name, s))

    if workers > 1:
        import multiprocessing as mp
        from concurrent.futures import ProcessPoolExecutor
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        os.environ.setdefault("OMP_NUM_THREADS", "1")
        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            finals = list(pool.map(_ablate_run, tasks))
    else:
        finals = [_ablate_run(t) for t in tasks]

    per_cell: dict[str, list[dict]] = {}
    for (name, _s), final in zip(labels, finals):
        per_cell.setdefault(name, []).append(final)
    table_rows = []
    detail = {}
    for name, _mlf, _fus in ABLATION_CELLS:
        runs = per_cell[name]
        med = {k: statistics.median(r[k] for r in runs) for k in ("ap", "ap50", "ar")}
        table_rows.append((name, med["ap"], med["ap50"], med["ar"]))
        detail[name] = {"median": med,
                        "seeds": [{k: r[k] for k in ("ap", "ap50", "ar")} for r in runs]}

    header = ("configuration", "AP", "AP.5", "AR")
    table = reports.format_table(header, table_rows)
    (out_dir / "ablation.txt").write_text(table, encoding="utf-8")
    reports.write_csv(out_dir / "ablation.csv", header, table_rows)
    (out_dir / "ablation.json").write_text(json.dumps(detail, indent=2, sort_keys=True),
                                           encoding="utf-8")
    reports.save_ablation_chart(table_rows, out_dir / "ablation.png")
    _write_manifest(out_dir, "ablate", cfg,
                    ["ablation.txt", "ablation.csv", "ablation.json", "ablation.png"])
    print(table, end="")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyperfuse", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")

    p = sub.add_parser("gen", help="generate the synthetic dataset")
    common(p)
    p = sub.add_parser("train", help="train a detector")
    common(p)
    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p = sub.add_parser("infer", help="run inference on images or a dataset")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="image file or .jsonl dataset")
    p = sub.add_parser("tile", help="slice an image into sliding-window patches")
    common(p)
    p.add_argument("--image", default=None, help="input image (ppm/png)")
    p.add_argument("--data", default=None, help=".jsonl dataset to take the image from")
    p.add_argument("--index", type=int, default=0)
    p = sub.add_parser("render", help="draw boxes onto image copies")
    common(p)
    p.add_argument("--data", required=True, help=".jsonl dataset")
    p.add_argument("--detections", default=None, help="detections.jsonl from infer")
    p.add_argument("--no-gt", action="store_true", help="skip ground-truth boxes")
    p = sub.add_parser("hg-debug", help="hypergraph statistics for a feature file")
    common(p)
    p.add_argument("--features", required=True, help=".json or .npy [N,C] features")
    p.add_argument("--lam", type=float, default=None, help="fixed distance threshold")
    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p)
    p = sub.add_parser("ablate", help="train and evaluate the four ablation cells")
    common(p)
    return parser


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "tile": cmd_tile,
    "render": cmd_render,
    "hg-debug": cmd_hg_debug,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    if args.command == "tile" and not (args.image or args.data):
        parser.error("tile needs --image or --data")
    try:
        return _COMMANDS[args.command](args, extra)
    except (ConfigError, DataError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
