"""Finite-difference verification of every differentiable operation and of the
composed backbone -> fusion -> head graph.

Central differences with h = 1e-5 at float64; a check passes when
|analytic - numeric| <= tol * max(1, |analytic|, |numeric|) at every probed
coordinate (tol = 1e-4). The composed check freezes the hypergraph built at
the base point so the probed function is smooth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import (Tape, Tensor, bce_with_logits, bilinear_sample,
                       concat_channels, conv2d, deform_conv2d, matmul, narrow,
                       resize_nearest, sigmoid, silu, tsum)
from .boxes import GroundTruthBox
from .config import default_config
from .hypergraph import HyperConvParams, build_hypergraph, hyperconv_matrix, hyperconv_spatial
from .model import Detector

H_STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_err: float
    passed: bool


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def check_gradients(fn: Callable[[Sequence[Tensor]], Tensor], arrays: Sequence[np.ndarray],
                    name: str, max_coords: int = 0, rng: np.random.Generator | None = None) -> CheckResult:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` receives freshly wrapped tensors and must return a scalar tensor.
    With ``max_coords`` > 0 only that many coordinates per input are probed.
    """
    tensors = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(tensors)
    tape.backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    max_err = 0.0
    for ti, base in enumerate(arrays):
        flat = base.astype(np.float64).reshape(-1)
        n = flat.size
        if max_coords and n > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        for ci in coords:
            def value_at(delta: float) -> float:
                probe = [a.astype(np.float64) for a in arrays]
                probe[ti] = probe[ti].copy()
                probe[ti].reshape(-1)[ci] += delta
                return float(fn([Tensor(p) for p in probe]).data)

            numeric = (value_at(H_STEP) - value_at(-H_STEP)) / (2 * H_STEP)
            err = _rel_err(float(analytic[ti].reshape(-1)[ci]), numeric)
            max_err = max(max_err, err)
    return CheckResult(name=name, max_err=max_err, passed=max_err < TOLERANCE)


def _op_checks(rng: np.random.Generator) -> list[CheckResult]:
    checks = []

    x = rng.standard_normal((3, 5, 6))
    w = rng.standard_normal((4, 3, 3, 3)) * 0.5
    b = rng.standard_normal(4) * 0.1
    checks.append(check_gradients(
        lambda ts: tsum(silu(conv2d(ts[0], ts[1], ts[2], stride=1, padding=1))),
        [x, w, b], "conv2d k3 s1 p1 + silu"))

    w2 = rng.standard_normal((2, 3, 2, 2)) * 0.5
    b2 = rng.standard_normal(2) * 0.1
    checks.append(check_gradients(
        lambda ts: tsum(conv2d(ts[0], ts[1], ts[2], stride=2, padding=0)),
        [x, w2, b2], "conv2d k2 s2 p0"))

    xd = rng.standard_normal((2, 6, 6))
    wd = rng.standard_normal((3, 2, 3, 3)) * 0.5
    off = rng.uniform(-1.2, 1.2, size=(18, 6, 6)) + 0.05
    bd = rng.standard_normal(3) * 0.1
    checks.append(check_gradients(
        lambda ts: tsum(deform_conv2d(ts[0], ts[1], ts[2], ts[3])),
        [xd, wd, off, bd], "deform_conv2d k3"))

    img = rng.standard_normal((3, 4, 5))
    coords = np.array([1.37]), np.array([2.21])
    checks.append(check_gradients(
        lambda ts: tsum(bilinear_sample(ts[0], ts[1], ts[2])),
        [img, coords[0], coords[1]], "bilinear_sample"))

    checks.append(check_gradients(
        lambda ts: tsum(silu(ts[0]) + sigmoid(ts[0]) * ts[0]),
        [rng.standard_normal((4, 4))], "silu + sigmoid"))

    checks.append(check_gradients(
        lambda ts: tsum(resize_nearest(ts[0], 6, 3)),
        [rng.standard_normal((3, 4, 5))], "resize_nearest"))

    checks.append(check_gradients(
        lambda ts: tsum(silu(concat_channels([ts[0], ts[1]]))),
        [rng.standard_normal((2, 3, 3)), rng.standard_normal((4, 3, 3))],
        "concat_channels"))

    checks.append(check_gradients(
        lambda ts: tsum(narrow(ts[0], 0, 1, 2) * 2.0),
        [rng.standard_normal((4, 3))], "narrow"))

    checks.append(check_gradients(
        lambda ts: tsum(matmul(ts[0], ts[1])),
        [rng.standard_normal((4, 3)), rng.standard_normal((3, 5))], "matmul"))

    targets = (rng.random((3, 4)) > 0.5).astype(np.float64)
    checks.append(check_gradients(
        lambda ts: tsum(bce_with_logits(ts[0], targets)),
        [rng.standard_normal((3, 4))], "bce_with_logits"))

    feats = rng.standard_normal((10, 4))
    hg = build_hypergraph(feats, 2.0)
    theta0 = rng.standard_normal((4, 4)) * 0.5
    checks.append(check_gradients(
        lambda ts: tsum(hyperconv_matrix(ts[0], hg, HyperConvParams(theta=ts[1]))),
        [feats, theta0], "hyperconv_matrix"))
    checks.append(check_gradients(
        lambda ts: tsum(hyperconv_spatial(ts[0], hg, HyperConvParams(theta=ts[1]))),
        [feats, theta0], "hyperconv_spatial"))

    return checks


def _composed_check(rng: np.random.Generator) -> CheckResult:
    """Finite differences through backbone -> fusion -> head -> loss on a toy
    image, probing a sample of coordinates from every parameter."""
    cfg = default_config()
    cfg["backbone"]["channels"] = [4, 4, 8, 8, 8]
    cfg["head"]["width"] = 8
    cfg["data"]["image_size"] = 64
    cfg["train"]["dtype"] = "f64"
    model = Detector(cfg, dtype=np.float64, init_seed=7)
    # Move off the zero-offset init: integer sampling positions sit on the
    # kinks of bilinear interpolation where central differences straddle two
    # linear pieces. Offset predictors get a firm bias into (0.3, 0.5) and only
    # tiny weights so every sampling position stays far from integers.
    for name, tensor in model.params.items():
        if ".off.w" in name:
            tensor.data += rng.uniform(-0.01, 0.01, size=tensor.shape)
        elif ".off.b" in name:
            tensor.data += rng.uniform(0.3, 0.5, size=tensor.shape)
        else:
            tensor.data += rng.uniform(-0.05, 0.05, size=tensor.shape)

    image = rng.uniform(0.0, 1.0, size=(3, 64, 64))
    gts = [GroundTruthBox(class_id=0, box=(10.0, 12.0, 30.0, 34.0)),
           GroundTruthBox(class_id=1, box=(36.0, 40.0, 58.0, 60.0))]
    _, aux = model.forward(image)
    frozen = aux.hyper.hypergraph if aux.hyper is not None else None

    def loss_value() -> float:
        loss, _ = model.loss_on(image, gts, frozen_hypergraph=frozen)
        return float(loss.data)

    with Tape() as tape:
        loss, _ = model.loss_on(image, gts, frozen_hypergraph=frozen)
    tape.backward(loss)

    max_err = 0.0
    for name, tensor in model.params.items():
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        gflat = grad.reshape(-1)
        n_probe = min(3, flat.size)
        coords = rng.choice(flat.size, size=n_probe, replace=False)
        for ci in coords:
            old = flat[ci]
            flat[ci] = old + H_STEP
            up = loss_value()
            flat[ci] = old - H_STEP
            down = loss_value()
            flat[ci] = old
            numeric = (up - down) / (2 * H_STEP)
            max_err = max(max_err, _rel_err(float(gflat[ci]), numeric))
    model.params.zero_grads()
    return CheckResult(name="composed backbone->fusion->head loss", max_err=max_err,
                       passed=max_err < TOLERANCE)


def run_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = _op_checks(rng)
    results.append(_composed_check(rng))
    return results
