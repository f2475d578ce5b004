"""Dense tensors with reverse-mode differentiation.

Every operator here works on numpy arrays laid out row-major as
``[..., C, H, W]``; any leading axes are treated as a batch. Operations are
pure: inputs are never mutated and a fresh ``Tensor`` is returned.

Gradients are tracked only while a :class:`ComputationRecord` is active::

    with ComputationRecord() as rec:
        loss = sum_all(relu(x))
    rec.backward(loss)

Backward rules live in ``BACKWARD`` keyed by operation id and are looked up
when the record is replayed, so a rule can be swapped out (tests use this to
inject a faulty rule and check that gradient checking catches it).
"""

from __future__ import annotations

import functools
import os
import threading
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationRecord",
    "ContractViolation",
    "BACKWARD",
    "default_dtype",
    "conv1x1",
    "conv2d",
    "add_bias",
    "dilated_max_pool",
    "resize_bilinear",
    "softmax_axis",
    "sigmoid_map",
    "add",
    "add_n",
    "mul",
    "scale",
    "relu",
    "channel_dot",
    "mul_map",
    "stack",
    "select",
    "concat_channels",
    "sum_all",
    "weighted_sum",
    "cross_entropy",
]

_PRECISIONS = {"f32": np.float32, "f64": np.float64}


class ContractViolation(ValueError):
    """Raised when an operator's preconditions do not hold."""


def default_dtype() -> type:
    """Training precision, overridable with ``CROSSFUSE_PRECISION=f32|f64``."""
    key = os.environ.get("CROSSFUSE_PRECISION", "f32").lower()
    if key not in _PRECISIONS:
        raise ContractViolation(f"CROSSFUSE_PRECISION must be one of {sorted(_PRECISIONS)}, got {key!r}")
    return _PRECISIONS[key]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None, name: str | None = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(dims={self.dims}, dtype={self.dtype}, requires_grad={self.requires_grad})"


# ---------------------------------------------------------------------------
# computation record
# ---------------------------------------------------------------------------

@dataclass
class _Entry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: Any


BACKWARD: dict[str, Callable[[Any, np.ndarray], tuple]] = {}

_local = threading.local()


def _active() -> "ComputationRecord | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class ComputationRecord:
    """Ordered log of differentiable operations for one forward pass.

    Not thread-safe by design: one record per training step, owned by the
    thread that created it.
    """

    def __init__(self) -> None:
        self.entries: list[_Entry] = []

    def __enter__(self) -> "ComputationRecord":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def backward(self, loss: Tensor) -> list[str]:
        """Propagate d(loss)/d(.) into ``.grad`` of every tracked tensor.

        Returns the op ids in the order they were visited (reverse of
        creation), which is handy for checking traversal order.
        """
        if loss.data.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got dims {loss.dims}")
        loss.grad = np.ones_like(loss.data)
        visited = []
        for entry in reversed(self.entries):
            g = entry.output.grad
            if g is None:
                continue
            visited.append(entry.op)
            grads = BACKWARD[entry.op](entry.ctx, g)
            for inp, gi in zip(entry.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=inp.data.dtype)
                inp.grad = gi if inp.grad is None else inp.grad + gi
        self.entries.clear()
        return visited


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, ctx: Any = None) -> Tensor:
    rec = _active()
    track = rec is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        rec.entries.append(_Entry(op, tuple(inputs), out, ctx))
    return out


def _register(op: str):
    def deco(fn):
        BACKWARD[op] = fn
        return fn
    return deco


def _need_same_dims(op: str, a: Tensor, b: Tensor) -> None:
    if a.dims != b.dims:
        raise ContractViolation(f"{op}: shape mismatch {a.dims} vs {b.dims}")


def _need_chw(op: str, x: Tensor) -> None:
    if x.data.ndim < 3:
        raise ContractViolation(f"{op}: expected [..., C, H, W], got dims {x.dims}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _need_same_dims("add", a, b)
    return _emit("add", (a, b), a.data + b.data)


@_register("add")
def _add_bw(ctx, g):
    return g, g


def add_n(ts: Sequence[Tensor]) -> Tensor:
    if not ts:
        raise ContractViolation("add_n: empty input list")
    for t in ts[1:]:
        _need_same_dims("add_n", ts[0], t)
    out = ts[0].data.copy()
    for t in ts[1:]:
        out = out + t.data
    return _emit("add_n", tuple(ts), out, len(ts))


@_register("add_n")
def _add_n_bw(n, g):
    return (g,) * n


def mul(a: Tensor, b: Tensor) -> Tensor:
    _need_same_dims("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data, (a.data, b.data))


@_register("mul")
def _mul_bw(ctx, g):
    a, b = ctx
    return g * b, g * a


def scale(x: Tensor, s: float) -> Tensor:
    return _emit("scale", (x,), x.data * s, s)


@_register("scale")
def _scale_bw(s, g):
    return (g * s,)


def divide(x: Tensor, d: float) -> Tensor:
    """``x / d`` by true division (not multiplication by ``1/d``)."""
    if d == 0:
        raise ContractViolation("divide: division by zero")
    return _emit("divide", (x,), x.data / d, d)


@_register("divide")
def _divide_bw(d, g):
    return (g / d,)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), mask)


@_register("relu")
def _relu_bw(mask, g):
    return (g * mask,)


def sigmoid_map(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _emit("sigmoid", (x,), y, y)


@_register("sigmoid")
def _sigmoid_bw(y, g):
    return (g * y * (1 - y),)


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ContractViolation(f"softmax_axis: axis {axis} out of range for dims {x.dims}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", (x,), y, (y, axis))


@_register("softmax")
def _softmax_bw(ctx, g):
    y, axis = ctx
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


# ---------------------------------------------------------------------------
# channel-wise linear maps
# ---------------------------------------------------------------------------

def conv1x1(x: Tensor, w: Tensor) -> Tensor:
    """Per-pixel matrix-vector product ``out[c] = sum_i w[c, i] * x[i]``."""
    _need_chw("conv1x1", x)
    if w.data.ndim != 2 or w.dims[1] != x.dims[-3]:
        raise ContractViolation(f"conv1x1: weight dims {w.dims} do not match input dims {x.dims}")
    c, h, wd = x.dims[-3:]
    out = np.matmul(w.data, x.data.reshape(*x.dims[:-2], h * wd)).reshape(*x.dims[:-3], w.dims[0], h, wd)
    return _emit("conv1x1", (x, w), out, (x.data, w.data))


@_register("conv1x1")
def _conv1x1_bw(ctx, g):
    x, w = ctx
    c, h, wd = x.shape[-3:]
    g2 = g.reshape(-1, w.shape[0], h * wd)
    x2 = x.reshape(-1, c, h * wd)
    gx = np.matmul(w.T, g2).reshape(x.shape)
    gw = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0)
    return gx, gw


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    _need_chw("add_bias", x)
    if b.dims != (x.dims[-3],):
        raise ContractViolation(f"add_bias: bias dims {b.dims} do not match channels of {x.dims}")
    return _emit("add_bias", (x, b), x.data + b.data[:, None, None], None)


@_register("add_bias")
def _add_bias_bw(ctx, g):
    axes = tuple(i for i in range(g.ndim) if i != g.ndim - 3)
    return g, g.sum(axis=axes)


def _im2col(xl: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Zero-padded patches of channels-last ``[B, H, W, C]`` as ``[B*Ho*Wo, k*k*C]``.

    Columns are ordered (row tap, column tap, channel).
    """
    nb, h, wd, c = xl.shape
    pad = k // 2
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    xp = np.zeros((nb, h + 2 * pad, wd + 2 * pad, c), dtype=xl.dtype)
    xp[:, pad:pad + h, pad:pad + wd] = xl
    # in a channels-last row the k taps of one window are a contiguous run of k*c values
    cols = np.empty((nb, ho, wo, k, k * c), dtype=xl.dtype)
    s0, s1, s2, s3 = xp.strides
    for a in range(k):
        cols[:, :, :, a] = np.lib.stride_tricks.as_strided(
            xp[:, a:], shape=(nb, ho, wo, k * c), strides=(s0, s1 * stride, s2 * stride, s3), writeable=False)
    return cols.reshape(-1, k * k * c)


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Square odd-kernel convolution with zero "same" padding.

    ``w`` has dims ``[C_out, C_in, k, k]``; output spatial size is
    ``ceil(H / stride)``.
    """
    _need_chw("conv2d", x)
    if w.data.ndim != 4 or w.dims[1] != x.dims[-3] or w.dims[2] != w.dims[3] or w.dims[2] % 2 == 0:
        raise ContractViolation(f"conv2d: weight dims {w.dims} incompatible with input dims {x.dims}")
    if stride < 1:
        raise ContractViolation(f"conv2d: stride must be >= 1, got {stride}")
    lead = x.dims[:-3]
    c, h, wd = x.dims[-3:]
    co, k = w.dims[0], w.dims[2]
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    xl = x.data.reshape(-1, c, h, wd).transpose(0, 2, 3, 1)
    nb = xl.shape[0]
    cols = _im2col(xl, k, stride)
    wmat = w.data.transpose(2, 3, 1, 0).reshape(k * k * c, co)
    out = (cols @ wmat).reshape(nb, ho, wo, co).transpose(0, 3, 1, 2).reshape(*lead, co, ho, wo)
    ctx = (cols, wmat, w.data, x.dims, stride, x.requires_grad)
    return _emit("conv2d", (x, w), np.ascontiguousarray(out), ctx)


@_register("conv2d")
def _conv2d_bw(ctx, g):
    cols, wmat, wdata, xdims, stride, need_gx = ctx
    lead = xdims[:-3]
    c, h, wd = xdims[-3:]
    co, _, k, _ = wdata.shape
    pad = k // 2
    ho, wo = g.shape[-2:]
    gl = g.reshape(-1, co, ho, wo).transpose(0, 2, 3, 1)
    nb = gl.shape[0]
    g2 = gl.reshape(-1, co)
    gw = (cols.T @ g2).reshape(k, k, c, co).transpose(3, 2, 0, 1)
    if not need_gx:
        return None, gw
    if stride == 1:
        # input gradient is a same-padded convolution with the flipped, transposed kernel
        wflip = wdata[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * co, c)
        gxl = (_im2col(gl, k, 1) @ wflip).reshape(nb, h, wd, c)
    else:
        gcols = (g2 @ wmat.T).reshape(nb, ho, wo, k * k, c)
        gxp = np.zeros((nb, h + 2 * pad, wd + 2 * pad, c), dtype=g.dtype)
        for a in range(k):
            for b in range(k):
                gxp[:, a:a + stride * ho:stride, b:b + stride * wo:stride] += gcols[:, :, :, a * k + b]
        gxl = gxp[:, pad:pad + h, pad:pad + wd]
    gx = gxl.transpose(0, 3, 1, 2).reshape(*lead, c, h, wd)
    return gx, gw


# ---------------------------------------------------------------------------
# spatial resampling
# ---------------------------------------------------------------------------

def _check_pool(kernel: int, dilation: int) -> None:
    if kernel < 1 or dilation < 1:
        raise ContractViolation(f"dilated_max_pool: kernel and dilation must be >= 1, got {kernel}, {dilation}")
    if kernel % 2 == 0:
        raise ContractViolation(f"dilated_max_pool: kernel must be odd, got {kernel}")


def _tap_offsets(kernel: int, dilation: int) -> list[tuple[int, int]]:
    """Tap displacements in row-major order."""
    half = (kernel - 1) // 2
    return [(a * dilation, b * dilation) for a in range(-half, half + 1) for b in range(-half, half + 1)]


def _shifted_max(x: np.ndarray, shifts: Sequence[int], axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Max of ``x`` shifted by each of ``shifts`` along ``axis``, skipping out-of-range taps.

    Also returns the index of the first shift attaining the max; strict
    comparison means earlier shifts win ties.
    """
    n = x.shape[axis]
    out = np.full(x.shape, -np.inf, dtype=x.dtype)
    arg = np.zeros(x.shape, dtype=np.int16)

    def sl(a, b):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(a, b)
        return tuple(idx)

    for t, d in enumerate(shifts):
        if abs(d) >= n:
            continue
        dst = sl(max(0, -d), n - max(0, d))
        src = sl(max(0, d), n + min(0, d))
        o, v, a = out[dst], x[src], arg[dst]
        better = v > o
        np.maximum(o, v, out=o)
        a += better * (t - a)
    return out, arg


def dilated_max_pool(x: Tensor, kernel: int, dilation: int) -> Tensor:
    """Stride-1 max pooling over dilated taps; output keeps the input's H, W.

    Out-of-range taps are skipped (as if padded with ``-inf``). The backward
    pass routes each output gradient to the first tap, in row-major tap
    order, that attains the maximum.
    """
    _check_pool(kernel, dilation)
    if kernel == 1:
        return _emit("identity", (x,), x.data.copy())
    half = (kernel - 1) // 2
    h = x.dims[-2]
    shifts = np.array([k * dilation for k in range(-half, half + 1)])
    # separable: max along W per row, then along H; taking the first maximal
    # row and, within it, the first maximal column reproduces the row-major
    # first-found tie-break of the full 2-D window
    # both passes run along axis -2, which is much faster than slicing the last axis
    colmax_t, colarg_t = _shifted_max(np.ascontiguousarray(np.swapaxes(x.data, -1, -2)), shifts, axis=-2)
    colmax, colarg = np.ascontiguousarray(np.swapaxes(colmax_t, -1, -2)), np.swapaxes(colarg_t, -1, -2)
    out, rowarg = _shifted_max(colmax, shifts, axis=-2)
    rows = np.arange(h)[:, None] + shifts[rowarg]
    colsel = np.take_along_axis(colarg, rows, axis=-2)
    arg = rowarg.astype(np.int32) * kernel + colsel
    offsets = _tap_offsets(kernel, dilation)
    return _emit("dilated_max_pool", (x,), out, (arg, offsets, x.dims))


@_register("identity")
def _identity_bw(ctx, g):
    return (g,)


@_register("dilated_max_pool")
def _pool_bw(ctx, g):
    arg, offsets, dims = ctx
    h, w = dims[-2:]
    dy = np.array([o[0] for o in offsets])[arg]
    dx = np.array([o[1] for o in offsets])[arg]
    yy, xx = np.indices((h, w))
    lead = int(np.prod(dims[:-2], dtype=np.int64))
    src = (yy + dy) * w + (xx + dx) + (np.arange(lead) * (h * w)).reshape(dims[:-2] + (1, 1))
    gx = np.bincount(src.ravel(), weights=g.ravel(), minlength=lead * h * w)
    return (gx.reshape(dims).astype(g.dtype),)


@functools.lru_cache(maxsize=64)
def _interp_matrix_cached(n_in: int, n_out: int, dtype: np.dtype) -> np.ndarray:
    m = interp_matrix(n_in, n_out, dtype)
    m.flags.writeable = False
    return m


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights ``[n_out, n_in]``, half-pixel centres.

    Source coordinate ``(i + 0.5) * n_in / n_out - 0.5`` clamped to
    ``[0, n_in - 1]``.
    """
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ContractViolation(f"resize_bilinear: output size must be positive, got {out_h}x{out_w}")
    if x.data.ndim < 2:
        raise ContractViolation(f"resize_bilinear: need at least 2 dims, got {x.dims}")
    h, w = x.dims[-2:]
    if (h, w) == (out_h, out_w):
        return _emit("identity", (x,), x.data.copy())
    rh = _interp_matrix_cached(h, out_h, x.dtype)
    rw = _interp_matrix_cached(w, out_w, x.dtype)
    out = rh @ x.data @ rw.T
    return _emit("resize_bilinear", (x,), out, (rh, rw))


@_register("resize_bilinear")
def _resize_bw(ctx, g):
    rh, rw = ctx
    return (rh.T @ g @ rw,)


# ---------------------------------------------------------------------------
# structural ops used by the fusion block
# ---------------------------------------------------------------------------

def channel_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel inner product over the channel axis: ``[..., C, H, W] -> [..., H, W]``."""
    _need_chw("channel_dot", a)
    _need_same_dims("channel_dot", a, b)
    return _emit("channel_dot", (a, b), (a.data * b.data).sum(axis=-3), (a.data, b.data))


@_register("channel_dot")
def _channel_dot_bw(ctx, g):
    a, b = ctx
    ge = g[..., None, :, :]
    return ge * b, ge * a


def mul_map(x: Tensor, m: Tensor) -> Tensor:
    """Scale every channel of ``x [..., C, H, W]`` by the map ``m [..., H, W]``."""
    _need_chw("mul_map", x)
    if m.dims != x.dims[:-3] + x.dims[-2:]:
        raise ContractViolation(f"mul_map: map dims {m.dims} do not match {x.dims}")
    return _emit("mul_map", (x, m), x.data * m.data[..., None, :, :], (x.data, m.data))


@_register("mul_map")
def _mul_map_bw(ctx, g):
    x, m = ctx
    return g * m[..., None, :, :], (g * x).sum(axis=-3)


def stack(ts: Sequence[Tensor], axis: int) -> Tensor:
    if not ts:
        raise ContractViolation("stack: empty input list")
    for t in ts[1:]:
        _need_same_dims("stack", ts[0], t)
    out = np.stack([t.data for t in ts], axis=axis)
    return _emit("stack", tuple(ts), out, (axis, len(ts)))


@_register("stack")
def _stack_bw(ctx, g):
    axis, n = ctx
    return tuple(np.take(g, i, axis=axis) for i in range(n))


def select(x: Tensor, index: int, axis: int) -> Tensor:
    return _emit("select", (x,), np.take(x.data, index, axis=axis).copy(), (index, axis, x.dims))


@_register("select")
def _select_bw(ctx, g):
    index, axis, dims = ctx
    out = np.zeros(dims, dtype=g.dtype)
    idx = [slice(None)] * len(dims)
    idx[axis] = index
    out[tuple(idx)] = g
    return (out,)


def concat_channels(ts: Sequence[Tensor]) -> Tensor:
    if not ts:
        raise ContractViolation("concat_channels: empty input list")
    for t in ts:
        _need_chw("concat_channels", t)
        if t.dims[:-3] != ts[0].dims[:-3] or t.dims[-2:] != ts[0].dims[-2:]:
            raise ContractViolation(f"concat_channels: dims {t.dims} incompatible with {ts[0].dims}")
    sizes = [t.dims[-3] for t in ts]
    return _emit("concat_channels", tuple(ts), np.concatenate([t.data for t in ts], axis=-3), sizes)


@_register("concat_channels")
def _concat_bw(sizes, g):
    bounds = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, bounds, axis=-3))


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    return _emit("sum_all", (x,), np.asarray(x.data.sum(), dtype=x.dtype), x.dims)


@_register("sum_all")
def _sum_all_bw(dims, g):
    return (np.broadcast_to(g, dims).copy(),)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(x * weights)`` with constant ``weights``; a generic scalar probe loss."""
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.shape != x.dims:
        raise ContractViolation(f"weighted_sum: weights {weights.shape} vs tensor {x.dims}")
    return _emit("weighted_sum", (x,), np.asarray((x.data * weights).sum(), dtype=x.dtype), weights)


@_register("weighted_sum")
def _weighted_sum_bw(weights, g):
    return (g * weights,)


def cross_entropy(logits: Tensor, labels: np.ndarray, class_weights: Sequence[float] | None = None) -> Tensor:
    """Class-weighted mean cross-entropy over pixels.

    ``logits`` is ``[..., K, H, W]`` and ``labels`` integer ``[..., H, W]``.
    The mean is normalised by the summed weight of the targets, so uniform
    weights give the plain per-pixel average.
    """
    _need_chw("cross_entropy", logits)
    labels = np.asarray(labels)
    k = logits.dims[-3]
    if labels.shape != logits.dims[:-3] + logits.dims[-2:]:
        raise ContractViolation(f"cross_entropy: labels {labels.shape} vs logits {logits.dims}")
    cw = np.ones(k) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if cw.shape != (k,):
        raise ContractViolation(f"cross_entropy: need {k} class weights, got {cw.shape}")
    z = logits.data - logits.data.max(axis=-3, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-3, keepdims=True))
    lab = labels[..., None, :, :].astype(np.intp)
    picked = np.take_along_axis(logp, lab, axis=-3)[..., 0, :, :]
    wpix = cw[labels].astype(logits.dtype)
    norm = wpix.sum()
    loss = -(wpix * picked).sum() / norm
    return _emit("cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), (logp, lab, wpix, norm))


@_register("cross_entropy")
def _cross_entropy_bw(ctx, g):
    logp, lab, wpix, norm = ctx
    grad = np.exp(logp)
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, lab, 1.0, axis=-3)
    grad = (grad - onehot) * (wpix[..., None, :, :] / norm)
    return (g * grad,)


# ---------------------------------------------------------------------------
# gradient checking and optimisation
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float

    def __float__(self) -> float:
        return self.max_rel_error


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3) -> GradCheckResult:
    """Compare analytic gradients against central differences.

    ``f`` rebuilds the scalar loss from the current contents of ``params``.
    All parameters must be 64-bit. Relative error per entry is
    ``|a - n| / max(|a|, |n|, 1e-8)``; the maximum over all entries is
    reported together with where it occurred.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ContractViolation(f"grad_check requires float64 parameters, {p!r} is {p.dtype}")
    for p in params:
        p.data = np.ascontiguousarray(p.data)   # so reshape(-1) below is a view
        p.requires_grad = True
        p.grad = None
    with ComputationRecord() as rec:
        loss = f()
    if loss.data.size != 1:
        raise ContractViolation(f"grad_check: loss must be scalar, got dims {loss.dims}")
    rec.backward(loss)

    worst = GradCheckResult(0.0, "", (), 0.0, 0.0)
    for pi, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            ana = float(analytic.reshape(-1)[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            if rel > worst.max_rel_error:
                idx = tuple(int(v) for v in np.unravel_index(i, p.dims))
                worst = GradCheckResult(rel, p.name or f"param{pi}", idx, ana, num)
    for p in params:
        p.grad = None
    return worst


class SGD:
    """Momentum SGD: ``v <- momentum * v + g``; ``p <- p - lr * v``.

    With ``clip_norm`` set, the gradients are first rescaled so their joint
    L2 norm is at most ``clip_norm``.
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0,
                 clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.last_grad_norm = 0.0

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ContractViolation(f"sgd_step: missing gradient for {p!r}")
        norm = float(np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in self.params)))
        self.last_grad_norm = norm
        factor = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = self.clip_norm / norm
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad if factor == 1.0 else p.grad * factor
            p.data = p.data - (self.lr * v).astype(p.dtype)
            p.grad = None


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float, velocity: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """Functional form of one momentum step; returns the updated velocity buffers."""
    opt = SGD(params, lr, momentum)
    if velocity is not None:
        opt.velocity = velocity
    opt.step()
    return opt.velocity
