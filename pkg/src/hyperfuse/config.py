"""Run configuration: documented defaults, JSON file loading, dotted-key
command-line overrides, and strict validation (unknown keys are rejected)."""

from __future__ import annotations

import copy
import json
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or unknown configuration input."""


DEFAULTS: dict = {
    "data": {
        "dir": "data/toy",            # dataset directory (train.jsonl / val.jsonl + images)
        "image_size": 128,            # generated image side, must be divisible by 32
        "train_images": 200,
        "val_images": 50,
        "n_cells": [4, 8],            # cells per generated image, inclusive range
        "abnormal_rule": {
            "ratio_threshold": 1.3,   # abnormal iff nucleus_r > threshold * neighborhood median
            "neighbor_radius": 50.0,  # pixels; cells with no neighbor use the global median
        },
        "seed": 11,                   # generator base seed; image i uses seed + i
        "window": 640,                # sliding-window tile side
        "stride": 512,                # sliding-window stride
        "image_format": "ppm",        # ppm or png
    },
    "backbone": {
        "channels": [16, 32, 64, 128, 256],  # widths of B1..B5 (even, for the split branch)
        "mlf_enabled": True,          # parallel-branch stages; False = plain split-bottleneck
        "use_deform": True,           # False swaps the deformable branch for a plain 3x3 conv
    },
    "fusion": {
        "enabled": True,              # False = plain bottom-up pathway over B3..B5
        "grid_stride": 16,            # fusion grid stride: 8, 16, or 32
        "lambda_quantile": 0.1,       # distance quantile for the hyperedge threshold
        "lambda_fixed": None,         # set to bypass the quantile rule with a constant
        "append_coords": False,       # append normalized (x, y) to the distance features
    },
    "head": {
        "width": 64,                  # channel width of N1..N3
        "num_classes": 2,
        "score_thresh": 0.25,
        "nms_iou": 0.5,
        "size_thresholds": [64.0, 160.0],  # sqrt(area) routing bounds for strides 8/16/32
        "loss_weights": [1.0, 0.5, 2.0],   # objectness, class, box
    },
    "train": {
        "lr": 0.003,
        "steps": 1200,
        "batch": 2,
        "seed": 0,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "warmup_steps": 50,           # linear learning-rate ramp at the start
        "lr_schedule": "cosine",      # cosine (decay to lr_floor x lr) or constant
        "lr_floor": 0.05,             # final fraction of lr under the cosine schedule
        "grad_clip": 10.0,            # global-norm gradient clip; 0 disables
        "avg_last_frac": 0.0,         # average weights over the final fraction of steps
        "log_every": 50,
        "eval_every": 0,              # steps between val-subset AP.5 logs; 0 = final only
        "eval_subset": 16,            # val images used for periodic AP.5
        "dtype": "f32",               # f32 for training, f64 for gradient checking
    },
    "eval": {
        "max_dets": 100,
    },
    "ablate": {
        "n_seeds": 3,
        "workers": 1,                 # process pool size for independent training runs
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here} must be a section, got {type(value).__name__}")
            _merge(base[key], value, here)
        else:
            base[key] = value


def load_config(path=None, overrides: list[tuple[str, str]] | None = None) -> dict:
    """Defaults, optionally updated from a JSON file, then dotted-key overrides."""
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON: {e}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{p}: config must be a JSON object")
        _merge(cfg, user)
    for key, raw in overrides or []:
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key: {key}")
            node = node[part]
        leaf = parts[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"unknown config key: {key}")
        if isinstance(node[leaf], dict):
            raise ConfigError(f"config key {key} is a section, not a value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node[leaf] = value
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    b = cfg["backbone"]
    if len(b["channels"]) != 5 or any(int(c) % 2 for c in b["channels"]):
        raise ConfigError(f"backbone.channels must be 5 even widths, got {b['channels']}")
    if cfg["fusion"]["grid_stride"] not in (8, 16, 32):
        raise ConfigError(f"fusion.grid_stride must be 8, 16, or 32, got {cfg['fusion']['grid_stride']}")
    if cfg["data"]["image_size"] % 32:
        raise ConfigError(f"data.image_size must be divisible by 32, got {cfg['data']['image_size']}")
    if cfg["train"]["dtype"] not in ("f32", "f64"):
        raise ConfigError(f"train.dtype must be f32 or f64, got {cfg['train']['dtype']}")
    if cfg["train"]["lr_schedule"] not in ("cosine", "constant"):
        raise ConfigError(f"train.lr_schedule must be cosine or constant, got {cfg['train']['lr_schedule']}")
    if cfg["train"]["batch"] < 1 or cfg["train"]["steps"] < 0:
        raise ConfigError("train.batch must be >= 1 and train.steps >= 0")
    lo, hi = cfg["data"]["n_cells"]
    if lo < 0 or hi < lo:
        raise ConfigError(f"data.n_cells must be a nondecreasing pair, got {cfg['data']['n_cells']}")
