"""Acceptance criteria, one test per criterion, each printing a PASS line.

Criterion 7 trains the full four-cell ablation on the 200/50 synthetic
dataset and is by far the slowest item; run the rest quickly with
``pytest tests/test_acceptance.py -k "not criterion_7"``.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from hyperfuse.autodiff import Tensor
from hyperfuse.boxes import Detection, GroundTruthBox
from hyperfuse.config import load_config
from hyperfuse.data import AnnotatedImage, GenConfig, gen_dataset, tile_image, write_annotations
from hyperfuse.evaluator import average_precision, evaluate
from hyperfuse.hypergraph import (HyperConvParams, build_hypergraph,
                                  hyperconv_matrix, hyperconv_spatial)

from _oracles import hypergraph_bruteforce

REPO = Path(__file__).resolve().parent.parent
TOY_CONFIG = REPO / "configs" / "toy.json"


def _report(num: int, text: str) -> None:
    print(f"[ACCEPTANCE {num}] PASS: {text}")


def test_criterion_1_gradient_suite():
    from hyperfuse.gradcheck import run_suite
    start = time.perf_counter()
    results = run_suite()
    elapsed = time.perf_counter() - start
    failed = [r for r in results if not r.passed]
    assert not failed, f"gradient checks failed: {[(r.name, r.max_err) for r in failed]}"
    assert elapsed < 120.0, f"gradient suite took {elapsed:.1f}s (budget 120s)"
    worst = max(r.max_err for r in results)
    _report(1, f"{len(results)} gradient checks < 1e-4 (worst {worst:.2e}) in {elapsed:.1f}s")


def test_criterion_2_hyperconv_form_equivalence():
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 65))
        c = int(rng.integers(1, 9))
        x = Tensor(rng.standard_normal((n, c)))
        hg = build_hypergraph(rng.standard_normal((n, 3)), float(rng.uniform(0.3, 3.0)))
        params = HyperConvParams(theta=Tensor(rng.standard_normal((c, c))))
        a = hyperconv_matrix(x, hg, params).data
        b = hyperconv_spatial(x, hg, params).data
        worst = max(worst, float(np.abs(a - b).max()))
    assert worst < 1e-10
    _report(2, f"matrix and spatial forms agree on 100 instances (worst {worst:.2e})")


def test_criterion_3_residual_identities():
    rng = np.random.default_rng(303)
    x = Tensor(rng.standard_normal((20, 5)))
    hg = build_hypergraph(rng.standard_normal((20, 2)), 1.0)
    zero = HyperConvParams(theta=Tensor(np.zeros((5, 5))))
    for fn in (hyperconv_matrix, hyperconv_spatial):
        np.testing.assert_array_equal(fn(x, hg, zero).data, x.data)

    feats = np.arange(12.0)[:, None] * 50.0
    singleton = build_hypergraph(feats, 1e-9)
    assert singleton.edge_degree.tolist() == [1] * 12
    y = Tensor(rng.standard_normal((12, 4)))
    theta = Tensor(rng.standard_normal((4, 4)))
    expected = y.data + y.data @ theta.data
    worst = 0.0
    for fn in (hyperconv_matrix, hyperconv_spatial):
        got = fn(y, singleton, HyperConvParams(theta=theta)).data
        worst = max(worst, float(np.abs(got - expected).max()))
    assert worst < 1e-12
    _report(3, f"theta=0 exact identity; singleton edges = X + X@theta (worst {worst:.2e})")


def test_criterion_4_construction_matches_bruteforce():
    hg = build_hypergraph(np.array([[0.0], [1.0], [5.0]]), 1.5)
    assert [sorted(hg.members(e).tolist()) for e in range(3)] == [[0, 1], [0, 1], [2]]
    assert hg.vertex_degree.tolist() == [2, 2, 1]

    rng = np.random.default_rng(404)
    for trial in range(100):
        n = int(rng.integers(1, 129))
        feats = rng.standard_normal((n, int(rng.integers(1, 5))))
        lam = float(rng.uniform(0.2, 2.5))
        hg = build_hypergraph(feats, lam)
        members, vdeg, edeg = hypergraph_bruteforce(feats.tolist(), lam)
        assert [sorted(hg.members(e).tolist()) for e in range(hg.num_edges)] == members, trial
        assert hg.vertex_degree.tolist() == vdeg
        assert hg.edge_degree.tolist() == edeg
    _report(4, "construction matches the brute-force reference on 100 instances")


def test_criterion_5_evaluator_oracle():
    ap = average_precision([True, False, True], [0.9, 0.8, 0.7], 2)
    assert ap == pytest.approx(0.8350, abs=1e-4)

    gts = {0: [GroundTruthBox(0, (0.0, 0.0, 10.0, 10.0)),
               GroundTruthBox(1, (30.0, 30.0, 50.0, 50.0))]}
    preds = {0: [Detection(g.class_id, 0.9, g.box) for g in gts[0]]}
    res = evaluate(preds, gts)
    assert (res.ap, res.ap50, res.ar) == (1.0, 1.0, 1.0)

    rng = np.random.default_rng(505)
    for _ in range(30):
        gmap, pmap = {}, {}
        for img in range(3):
            boxes = []
            for _ in range(int(rng.integers(0, 5))):
                x, y = rng.uniform(0, 90, 2)
                boxes.append(GroundTruthBox(int(rng.integers(0, 2)),
                                            (x, y, x + rng.uniform(3, 25), y + rng.uniform(3, 25))))
            gmap[img] = boxes
            dets = []
            for g in boxes:
                if rng.random() < 0.75:
                    jx, jy = rng.uniform(-5, 5, 2)
                    x1, y1, x2, y2 = g.box
                    dets.append(Detection(g.class_id, float(rng.random()),
                                          (x1 + jx, y1 + jy, x2 + jx, y2 + jy)))
            for _ in range(int(rng.integers(0, 4))):
                x, y = rng.uniform(0, 90, 2)
                dets.append(Detection(int(rng.integers(0, 2)), float(rng.random()),
                                      (x, y, x + 12, y + 12)))
            pmap[img] = dets
        if not any(gmap.values()):
            continue
        res = evaluate(pmap, gmap)
        assert res.ap50 >= res.ap - 1e-12
    _report(5, "AP.5 = 0.8350 hand trace; perfect = 1.0 exactly; AP.5 >= AP fuzzed")


def test_criterion_6_tiler_coverage():
    tiles = tile_image(AnnotatedImage(image=np.zeros((3, 640, 1000), dtype=np.float32),
                                      gts=[]), 640, 512)
    assert sorted({off[0] for _, off in tiles}) == [0, 360]

    rng = np.random.default_rng(606)
    for _ in range(100):
        h = int(rng.integers(640, 3001))
        w = int(rng.integers(640, 3001))
        img = AnnotatedImage(image=np.zeros((3, h, w), dtype=np.float32), gts=[])
        covered = np.zeros((h, w), dtype=bool)
        for patch, (ox, oy) in tile_image(img, 640, 512):
            assert patch.image.shape == (3, 640, 640)
            covered[oy:oy + 640, ox:ox + 640] = True
        assert covered.all(), (h, w)
    _report(6, "100 random sizes fully covered by exact 640x640 windows; clamping case = {0, 360}")


@pytest.mark.slow
def test_criterion_7_toy_training_trend(tmp_path):
    from hyperfuse.cli import main as cli_main

    cfg = load_config(TOY_CONFIG)
    assert cfg["train"]["steps"] <= 2000
    assert cfg["data"]["train_images"] == 200 and cfg["data"]["val_images"] == 50
    assert cfg["data"]["image_size"] == 128

    data_dir = tmp_path / "data"
    workers = min(4, os.cpu_count() or 1)
    start = time.perf_counter()
    assert cli_main(["gen", "--config", str(TOY_CONFIG),
                     "--data.dir", str(data_dir)]) == 0
    out = tmp_path / "ablate"
    assert cli_main(["ablate", "--config", str(TOY_CONFIG),
                     "--data.dir", str(data_dir), "--out", str(out),
                     "--ablate.workers", str(workers)]) == 0
    elapsed = time.perf_counter() - start

    table = (out / "ablation.txt").read_text()
    detail = json.loads((out / "ablation.json").read_text())
    rows = (out / "ablation.csv").read_text().splitlines()
    assert len(rows) == 5 and rows[0].count(",") == 3  # 4 cells x 3 metric columns
    print(table)

    full = detail["+MLF-SNet and CLFFS-HC"]["median"]["ap50"]
    base = detail["baseline"]["median"]["ap50"]
    assert full >= 0.70, f"full-model median AP.5 {full:.4f} < 0.70"
    assert full >= base, f"full {full:.4f} below baseline {base:.4f}"
    _report(7, f"median AP.5 full {full:.4f} >= 0.70 and >= baseline {base:.4f} "
               f"({elapsed / 60:.1f} min, {workers} worker(s))")


def test_criterion_8_determinism(tmp_path):
    from hyperfuse.cli import main as cli_main

    cfg_path = tmp_path / "tiny.json"
    cfg_path.write_text(json.dumps({
        "data": {"dir": str(tmp_path / "d"), "image_size": 64, "train_images": 6,
                 "val_images": 2, "n_cells": [2, 3], "seed": 3},
        "backbone": {"channels": [4, 4, 8, 8, 8]},
        "head": {"width": 8},
        "train": {"steps": 6, "batch": 2, "seed": 4, "log_every": 2, "warmup_steps": 2},
    }))
    assert cli_main(["gen", "--config", str(cfg_path)]) == 0
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli_main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        outs.append(out)
    ck_a = (outs[0] / "checkpoint.ckpt").read_bytes()
    ck_b = (outs[1] / "checkpoint.ckpt").read_bytes()
    assert ck_a == ck_b
    m_a = (outs[0] / "metrics.jsonl").read_bytes()
    m_b = (outs[1] / "metrics.jsonl").read_bytes()
    assert m_a == m_b
    _report(8, f"identical config+seed gives bit-identical checkpoint ({len(ck_a)} bytes) and metrics log")
