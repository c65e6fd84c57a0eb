"""Dense tensors with reverse-mode automatic differentiation on an explicit tape.

Wrap the forward computation in ``with Tape() as tape:`` and call
``tape.backward(loss)`` (or the module-level ``backward(tape, loss)``) to
populate ``.grad`` on every tracked leaf. float64 is the precision for tests
and gradient checks, float32 the training precision; tensor-tensor operations
never mix the two silently. Plain numpy arrays and Python scalars are accepted
as constant (non-differentiated) operands.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "GraphError",
    "backward",
    "apply_op",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sigmoid",
    "silu",
    "maximum",
    "minimum",
    "tsum",
    "tmean",
    "reshape",
    "transpose2d",
    "matmul",
    "narrow",
    "gather_pixels",
    "concat_channels",
    "conv2d",
    "deform_conv2d",
    "bilinear_sample",
    "resize_nearest",
    "bce_with_logits",
    "kaiming_uniform",
]

Scalar = Union[int, float]


class ShapeError(ValueError):
    """Operand shapes or channel counts violate an operation contract."""


class GraphError(RuntimeError):
    """Tape misuse: non-scalar loss, repeated backward, or loss not on tape."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op}: non-finite values in result")


class Tensor:
    """Dense row-major array, optionally tracked for reverse-mode gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar; constants (scalars / ndarrays) stay out of the graph
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


_TAPE_STACK: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of operations, replayed in reverse by ``backward``.

    Node ids are assigned in registration order, so every record's output id
    is strictly greater than its input ids and a single reverse sweep visits
    each node at most once.
    """

    def __init__(self):
        self._records: list[tuple[str, tuple[int, ...], int, Callable]] = []
        self._ids: dict[int, int] = {}
        self._nodes: list[Tensor] = []
        self._output_ids: set[int] = set()
        self._spent = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._records)

    def _node_id(self, t: Tensor) -> int:
        nid = self._ids.get(id(t))
        if nid is None:
            nid = len(self._nodes)
            self._ids[id(t)] = nid
            self._nodes.append(t)
        return nid

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: Callable) -> None:
        in_ids = tuple(self._node_id(t) for t in inputs)
        out_id = self._node_id(output)
        self._output_ids.add(out_id)
        self._records.append((op, in_ids, out_id, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients of ``loss`` into every tracked leaf's ``.grad``."""
        if self._spent:
            raise GraphError("backward already ran on this tape; record a fresh tape")
        if loss.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        loss_id = self._ids.get(id(loss))
        if loss_id is None or loss_id not in self._output_ids:
            raise GraphError("loss tensor is not an output recorded on this tape")
        self._spent = True

        grads: dict[int, np.ndarray] = {loss_id: np.ones(loss.shape, dtype=loss.dtype)}
        for op, in_ids, out_id, backward_fn in reversed(self._records):
            g_out = grads.get(out_id)
            if g_out is None:
                continue
            g_ins = backward_fn(g_out)
            for nid, g in zip(in_ids, g_ins):
                if g is None:
                    continue
                acc = grads.get(nid)
                grads[nid] = g if acc is None else acc + g
        for nid, tensor in enumerate(self._nodes):
            if nid in self._output_ids or not tensor.requires_grad:
                continue
            g = grads.get(nid)
            if g is None:
                continue
            tensor.grad = g if tensor.grad is None else tensor.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def apply_op(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
             backward_fn: Callable) -> Tensor:
    """Wrap a computed result as a graph node.

    ``backward_fn(g)`` must return one gradient (ndarray or None) per input,
    in order. This is the extension hook used by operations defined outside
    this module (e.g. hypergraph aggregation).
    """
    _check_finite(out_data, name)
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.record(name, inputs, out, backward_fn)
    return out


def _const(x, like: Tensor, op: str) -> np.ndarray:
    arr = np.asarray(x, dtype=like.dtype)
    if np.broadcast_shapes(like.shape, arr.shape) != like.shape:
        raise ShapeError(f"{op}: constant operand of shape {arr.shape} does not broadcast to {like.shape}")
    return arr


def _pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: dtypes {a.dtype} and {b.dtype} differ")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _pair(a, b, "add")
        return apply_op("add", (a, b), a.data + b.data, lambda g: (g, g))
    c = _const(b, a, "add")
    return apply_op("add", (a,), a.data + c, lambda g: (g,))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _pair(a, b, "sub")
        return apply_op("sub", (a, b), a.data - b.data, lambda g: (g, -g))
    c = _const(b, a, "sub")
    return apply_op("sub", (a,), a.data - c, lambda g: (g,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _pair(a, b, "mul")
        ad, bd = a.data, b.data
        return apply_op("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))
    c = _const(b, a, "mul")
    return apply_op("mul", (a,), a.data * c, lambda g: (g * c,))


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _pair(a, b, "div")
        ad, bd = a.data, b.data
        return apply_op("div", (a, b), ad / bd, lambda g: (g / bd, -g * ad / (bd * bd)))
    c = _const(b, a, "div")
    return apply_op("div", (a,), a.data / c, lambda g: (g / c,))


def neg(a: Tensor) -> Tensor:
    return apply_op("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # the finite guard raises instead
        out = np.exp(a.data)
    return apply_op("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    return apply_op("log", (a,), out, lambda g: (g / a.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-x) overflowing to inf still yields the correct 0.0 limit
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return apply_op("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), the activation used throughout the network."""
    s = _sigmoid(a.data)
    out = a.data * s
    return apply_op("silu", (a,), out, lambda g: (g * (s + out * (1.0 - s)),))


def maximum(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _pair(a, b, "maximum")
        take_a = a.data >= b.data
        return apply_op("maximum", (a, b), np.where(take_a, a.data, b.data),
                        lambda g: (np.where(take_a, g, 0.0), np.where(take_a, 0.0, g)))
    c = _const(b, a, "maximum")
    take_a = a.data >= c
    return apply_op("maximum", (a,), np.where(take_a, a.data, c),
                    lambda g: (np.where(take_a, g, 0.0),))


def minimum(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _pair(a, b, "minimum")
        take_a = a.data <= b.data
        return apply_op("minimum", (a, b), np.where(take_a, a.data, b.data),
                        lambda g: (np.where(take_a, g, 0.0), np.where(take_a, 0.0, g)))
    c = _const(b, a, "minimum")
    take_a = a.data <= c
    return apply_op("minimum", (a,), np.where(take_a, a.data, c),
                    lambda g: (np.where(take_a, g, 0.0),))


# ---------------------------------------------------------------------------
# reductions / shape


def tsum(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return apply_op("sum", (a,), np.asarray(a.data.sum(), dtype=dtype),
                    lambda g: (np.broadcast_to(g, shape).astype(dtype, copy=True),))


def tmean(a: Tensor) -> Tensor:
    shape, dtype, n = a.shape, a.dtype, a.size
    return apply_op("mean", (a,), np.asarray(a.data.mean(), dtype=dtype),
                    lambda g: (np.broadcast_to(g / n, shape).astype(dtype, copy=True),))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return apply_op("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose2d: expected 2-D, got {a.shape}")
    return apply_op("transpose2d", (a,), np.ascontiguousarray(a.data.T),
                    lambda g: (np.ascontiguousarray(g.T),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"matmul: dtypes {a.dtype} and {b.dtype} differ")
    ad, bd = a.data, b.data
    return apply_op("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(f"narrow: [{start}, {start + length}) out of range for axis {axis} of {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    shape, dtype = a.shape, a.dtype

    def bwd(g):
        gi = np.zeros(shape, dtype=dtype)
        gi[sl] = g
        return (gi,)

    return apply_op("narrow", (a,), a.data[sl].copy(), bwd)


def gather_pixels(a: Tensor, flat_idx: np.ndarray) -> Tensor:
    """Gather spatial positions from a [C,H,W] map into [C,P] columns."""
    if a.ndim != 3:
        raise ShapeError(f"gather_pixels: expected [C,H,W], got {a.shape}")
    c, h, w = a.shape
    idx = np.asarray(flat_idx, dtype=np.int64)
    flat = a.data.reshape(c, h * w)
    dtype = a.dtype

    def bwd(g):
        gi = np.zeros((c, h * w), dtype=dtype)
        np.add.at(gi, (slice(None), idx), g)
        return (gi.reshape(c, h, w),)

    return apply_op("gather_pixels", (a,), flat[:, idx].copy(), bwd)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Stack [C_i,H,W] maps along the channel axis in argument order."""
    if not inputs:
        raise ShapeError("concat_channels: empty input list")
    hw = inputs[0].shape[1:]
    for t in inputs:
        if t.ndim != 3:
            raise ShapeError(f"concat_channels: expected [C,H,W], got {t.shape}")
        if t.shape[1:] != hw:
            raise ShapeError(f"concat_channels: spatial extents differ: {t.shape[1:]} vs {hw}")
    splits = np.cumsum([t.shape[0] for t in inputs])[:-1]
    out = np.concatenate([t.data for t in inputs], axis=0)
    return apply_op("concat_channels", tuple(inputs), out,
                    lambda g: tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=0)))


# ---------------------------------------------------------------------------
# convolution and sampling


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [C_in,H,W] with [C_out,C_in,k,k] + bias, zero padded."""
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected x[C,H,W], w[Co,Ci,k,k], got {x.shape}, {w.shape}")
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {cin_w}")
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    k, s, p = kh, stride, padding
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output extent would be {ho}x{wo}")

    if k == 1 and s == 1 and p == 0:
        # pointwise fast path: plain GEMM over flattened pixels
        cols = x.data.reshape(cin, h * wd)
        wmat = w.data.reshape(cout, cin)
        out = (wmat @ cols + b.data[:, None]).reshape(cout, h, wd)

        def bwd1(g):
            gmat = g.reshape(cout, h * wd)
            gw = (gmat @ cols.T).reshape(w.shape)
            gb = gmat.sum(axis=1)
            gx = (wmat.T @ gmat).reshape(cin, h, wd)
            return gx, gw, gb

        return apply_op("conv2d", (x, w, b), out, bwd1)

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(cin * k * k, ho * wo)
    wmat = w.data.reshape(cout, cin * k * k)
    out = (wmat @ cols + b.data[:, None]).reshape(cout, ho, wo)

    def bwd(g):
        gmat = g.reshape(cout, ho * wo)
        gw = (gmat @ cols.T).reshape(w.shape)
        gb = gmat.sum(axis=1)
        gcols = (wmat.T @ gmat).reshape(cin, k, k, ho, wo)
        gxp = np.zeros((cin, h + 2 * p, wd + 2 * p), dtype=x.dtype)
        for ki in range(k):
            for kj in range(k):
                gxp[:, ki:ki + s * ho:s, kj:kj + s * wo:s] += gcols[:, ki, kj]
        gx = gxp[:, p:p + h, p:p + wd] if p else gxp
        return gx, gw, gb

    return apply_op("conv2d", (x, w, b), out, bwd)


def _bilinear_weights(px, py, h, w):
    """Corner indices, weights, and validity masks for zero-padded sampling."""
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1
    corners = []
    for yi, xi, wgt in (
        (y0, x0, (1 - fy) * (1 - fx)),
        (y0, x1, (1 - fy) * fx),
        (y1, x0, fy * (1 - fx)),
        (y1, x1, fy * fx),
    ):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        idx = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
        corners.append((idx, wgt, valid))
    return corners, fx, fy


def bilinear_sample(x: Tensor, xc, yc) -> Tensor:
    """Bilinear read of a [C,H,W] map at real coordinates; zero outside the grid.

    ``xc``/``yc`` may be Python floats or scalar tensors; gradients flow to
    whichever operands are tracked.
    """
    if x.ndim != 3:
        raise ShapeError(f"bilinear_sample: expected [C,H,W], got {x.shape}")
    c, h, w = x.shape
    xc_t = xc if isinstance(xc, Tensor) else None
    yc_t = yc if isinstance(yc, Tensor) else None
    for t in (xc_t, yc_t):
        if t is not None and t.size != 1:
            raise ShapeError(f"bilinear_sample: coordinates must be scalar, got shape {t.shape}")
    px = xc.data.item() if xc_t is not None else float(xc)
    py = yc.data.item() if yc_t is not None else float(yc)

    corners, _, _ = _bilinear_weights(np.asarray(px), np.asarray(py), h, w)
    flat = x.data.reshape(c, h * w)
    vals = [flat[:, int(idx)] * (wgt if ok else 0.0) for idx, wgt, ok in corners]
    raw = [flat[:, int(idx)] * (1.0 if ok else 0.0) for idx, _, ok in corners]
    out = vals[0] + vals[1] + vals[2] + vals[3]
    v00, v01, v10, v11 = raw
    fx = px - math.floor(px)
    fy = py - math.floor(py)

    def bwd(g):
        grads = []
        gx = np.zeros((c, h * w), dtype=x.dtype)
        for (idx, wgt, ok), _ in zip(corners, range(4)):
            if ok:
                gx[:, int(idx)] += g * wgt
        grads.append(gx.reshape(c, h, w))
        if xc_t is not None:
            dvdx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
            grads.append(np.asarray(np.dot(g, dvdx), dtype=x.dtype).reshape(xc_t.shape))
        if yc_t is not None:
            dvdy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
            grads.append(np.asarray(np.dot(g, dvdy), dtype=x.dtype).reshape(yc_t.shape))
        return tuple(grads)

    inputs = [x] + [t for t in (xc_t, yc_t) if t is not None]
    return apply_op("bilinear_sample", tuple(inputs), out.astype(x.dtype), bwd)


def deform_conv2d(x: Tensor, w: Tensor, offsets: Tensor, b: Tensor) -> Tensor:
    """3x3 (stride 1, padding k//2) convolution with learned per-tap offsets.

    ``offsets`` carries 2*k*k channels: channel 2t is the x displacement and
    2t+1 the y displacement of tap t (row-major over the kernel). Sampling is
    bilinear with zero padding outside the grid; with all offsets zero this is
    exactly ``conv2d(x, w, b, stride=1, padding=k//2)``.
    """
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"deform_conv2d: expected x[C,H,W], w[Co,Ci,k,k], got {x.shape}, {w.shape}")
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"deform_conv2d: input has {cin} channels but weight expects {cin_w}")
    if kh != kw:
        raise ShapeError(f"deform_conv2d: kernel must be square, got {kh}x{kw}")
    k = kh
    kk = k * k
    if offsets.shape != (2 * kk, h, wd):
        raise ShapeError(f"deform_conv2d: offsets shape {offsets.shape} != ({2 * kk}, {h}, {wd})")
    if b.shape != (cout,):
        raise ShapeError(f"deform_conv2d: bias shape {b.shape} != ({cout},)")
    pad = k // 2
    dtype = x.dtype

    off = offsets.data.reshape(kk, 2, h, wd)
    taps_y, taps_x = np.divmod(np.arange(kk), k)
    base_y = (np.arange(h)[None, :, None] - pad + taps_y[:, None, None]).astype(dtype)
    base_x = (np.arange(wd)[None, None, :] - pad + taps_x[:, None, None]).astype(dtype)
    px = base_x + off[:, 0]
    py = base_y + off[:, 1]

    corners, fx, fy = _bilinear_weights(px, py, h, wd)
    flat = x.data.reshape(cin, h * wd)
    raw = []      # per-corner gathered values, zeroed outside the grid
    weights = []  # per-corner effective bilinear weight (zero where invalid)
    cols = np.zeros((cin, kk, h, wd), dtype=dtype)
    for idx, wgt, valid in corners:
        v = flat[:, idx.reshape(-1)].reshape(cin, kk, h, wd)
        v *= valid[None]
        wv = (wgt * valid).astype(dtype)
        raw.append(v)
        weights.append(wv)
        cols += wv[None] * v
    cols2 = cols.reshape(cin * kk, h * wd)
    wmat = w.data.reshape(cout, cin * kk)
    out = (wmat @ cols2 + b.data[:, None]).reshape(cout, h, wd)

    def bwd(g):
        gmat = g.reshape(cout, h * wd)
        gw = (gmat @ cols2.T).reshape(w.shape)
        gb = gmat.sum(axis=1)
        gcols = (wmat.T @ gmat).reshape(cin, kk, h, wd)
        # input gradient: scatter each corner's weighted contribution back
        gx = np.zeros(cin * h * wd, dtype=np.float64)
        chan_off = (np.arange(cin) * (h * wd))[:, None]
        for (idx, _wgt, _valid), wv in zip(corners, weights):
            contrib = (gcols * wv[None]).reshape(-1)
            full_idx = (chan_off + idx.reshape(1, -1)).reshape(-1)
            gx += np.bincount(full_idx, weights=contrib, minlength=cin * h * wd)
        gx = gx.astype(dtype).reshape(cin, h, wd)
        # offset gradient via the bilinear derivative
        v00, v01, v10, v11 = raw
        dvdx = (1 - fy)[None] * (v01 - v00) + fy[None] * (v11 - v10)
        dvdy = (1 - fx)[None] * (v10 - v00) + fx[None] * (v11 - v01)
        goff = np.empty((kk, 2, h, wd), dtype=dtype)
        goff[:, 0] = (gcols * dvdx).sum(axis=0)
        goff[:, 1] = (gcols * dvdy).sum(axis=0)
        return gx, gw, goff.reshape(2 * kk, h, wd), gb

    return apply_op("deform_conv2d", (x, w, offsets, b), out, bwd)


def resize_nearest(x: Tensor, h2: int, w2: int) -> Tensor:
    """Nearest-neighbor resample; source index = floor(dst * src / dst_extent)."""
    if x.ndim != 3:
        raise ShapeError(f"resize_nearest: expected [C,H,W], got {x.shape}")
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"resize_nearest: target extents must be >= 1, got {h2}x{w2}")
    c, h, w = x.shape
    si = (np.arange(h2) * h) // h2
    sj = (np.arange(w2) * w) // w2
    out = x.data[:, si][:, :, sj]
    flat_idx = (si[:, None] * w + sj[None, :]).reshape(-1)
    dtype = x.dtype

    def bwd(g):
        chan_off = (np.arange(c) * (h * w))[:, None]
        full_idx = (chan_off + flat_idx[None, :]).reshape(-1)
        gi = np.bincount(full_idx, weights=g.reshape(c, -1).reshape(-1).astype(np.float64),
                         minlength=c * h * w)
        return (gi.astype(dtype).reshape(c, h, w),)

    return apply_op("resize_nearest", (x,), np.ascontiguousarray(out), bwd)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on raw logits, numerically stable."""
    y = _const(targets, logits, "bce_with_logits")
    z = logits.data
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    s = _sigmoid(z)
    return apply_op("bce_with_logits", (logits,), out, lambda g: (g * (s - y),))


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    """He-uniform draw with bound sqrt(6 / fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
