"""Named parameter sets, the Adam update, and binary checkpoint serialization.

Checkpoint layout (bit-exact): magic ``HGCKPT1\\n``, an 8-byte little-endian
unsigned header length, a UTF-8 JSON array of ``{name, dtype, shape,
byte_offset}`` entries, then raw little-endian payloads in header order.
``byte_offset`` is relative to the start of the payload section.
"""

from __future__ import annotations

import json
import math
from typing import Iterator

import numpy as np

from .autodiff import ShapeError, Tensor

CHECKPOINT_MAGIC = b"HGCKPT1\n"

_DTYPES = {"f32": "<f4", "f64": "<f8"}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class ModelParams:
    """Insertion-ordered map of parameter name to tensor."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name: {name}")
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Collect gradients by name; parameters without a gradient are omitted."""
        return {n: t.grad for n, t in self._tensors.items() if t.grad is not None}

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for n, t in self._tensors.items():
            out.add(n, Tensor(t.data.copy(), requires_grad=t.requires_grad))
        return out

    def num_values(self) -> int:
        return sum(t.size for t in self._tensors.values())


def adam_step(params: ModelParams, grads: dict[str, np.ndarray],
              state: dict[str, tuple[np.ndarray, np.ndarray]],
              lr: float, beta1: float, beta2: float, eps: float, t: int) -> ModelParams:
    """One Adam update with bias correction; moment buffers live in ``state``.

    Parameters with no entry in ``grads`` are left untouched. Updates happen
    in place; the same ``params`` object is returned.
    """
    if t < 1:
        raise ValueError(f"adam_step: t must be >= 1, got {t}")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        mv = state.get(name)
        if mv is None:
            mv = (np.zeros_like(p.data), np.zeros_like(p.data))
            state[name] = mv
        m, v = mv
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


class Adam:
    """Adam optimizer bound to a parameter set; step counter starts at 1."""

    def __init__(self, params: ModelParams, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.state: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps, self.t)


def save_checkpoint(path, params: ModelParams) -> None:
    entries = []
    offset = 0
    payloads = []
    for name, t in params.items():
        dname = _DTYPE_NAMES.get(t.data.dtype)
        if dname is None:
            raise TypeError(f"checkpoint: unsupported dtype {t.data.dtype} for {name}")
        raw = np.ascontiguousarray(t.data, dtype=_DTYPES[dname]).tobytes()
        entries.append({"name": name, "dtype": dname, "shape": list(t.shape), "byte_offset": offset})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(entries, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for raw in payloads:
            f.write(raw)


def load_checkpoint(path, requires_grad: bool = True) -> ModelParams:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    hlen = int.from_bytes(blob[8:16], "little")
    try:
        entries = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: corrupt checkpoint header: {e}") from None
    base = 16 + hlen
    params = ModelParams()
    for e in entries:
        dt = np.dtype(_DTYPES[e["dtype"]])
        shape = tuple(e["shape"])
        count = int(math.prod(shape)) if shape else 1
        start = base + e["byte_offset"]
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=start).reshape(shape)
        params.add(e["name"], Tensor(arr.copy(), requires_grad=requires_grad))
    return params
