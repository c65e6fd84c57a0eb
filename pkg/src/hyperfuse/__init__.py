"""Hypergraph-fusion cell detector.

A desk-scale detection stack: a minimal tape-based autodiff engine, a
five-level backbone with parallel convolution branches, cross-level feature
fusion through residual hypergraph convolution, an anchor-free head, a
synthetic context-dependent data pipeline, and a COCO-style evaluator.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward
from .boxes import Detection, GroundTruthBox
from .params import Adam, ModelParams, load_checkpoint, save_checkpoint

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "Detection",
    "GroundTruthBox",
    "Adam",
    "ModelParams",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]
