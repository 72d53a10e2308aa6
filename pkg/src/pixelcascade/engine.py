"""Dense 4-D tensor core with reverse-mode differentiation.

Everything the cascade needs and nothing more: float64 NCHW tensors, an
explicit gradient tape, the small op set (conv, relu, max-pool, bilinear
upsample, summation, sigmoid, channel concat, fused BCE losses), and a
central finite-difference oracle used by the test suite.

Design notes
------------
* All values are 64-bit floats and all tensors are 4-D ``(batch, channels,
  height, width)``. Scalars are ``(1, 1, 1, 1)`` tensors.
* Tensors are immutable once produced by an op; ``grad`` buffers are the only
  mutated state and belong to a single :func:`backward` pass.
* Each op has a pure-ndarray kernel (``*_kernel`` functions). The autodiff
  wrappers and the raw "kernel mode" used for inference both call the same
  kernels, so there is a single source of numeric truth.
* NaN/Inf anywhere is a hard error, raised at op boundaries.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np


class EngineError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(EngineError):
    pass


class NonFiniteError(EngineError):
    pass


class TapeError(EngineError):
    pass


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """A 4-D float64 array with an optional gradient slot.

    Values are immutable by convention after construction; ops never write
    into an existing tensor's ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(
                f"tensors are 4-D (batch, channels, height, width); got shape {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed with NaN/Inf values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def scalar(value: float) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), float(value)))


@dataclass
class TapeEntry:
    op: str
    output: Tensor
    inputs: tuple
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of op applications, used for reverse-mode traversal.

    Activate with ``with Tape() as tape:``; ops executed inside the block are
    recorded when any input requires a gradient.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._watched: dict[int, Tensor] = {}

    def record(self, op, output, inputs, backward_fn):
        self.entries.append(TapeEntry(op, output, tuple(inputs), backward_fn))
        for t in inputs:
            if isinstance(t, Tensor) and t.requires_grad:
                self._watched[id(t)] = t

    def __enter__(self):
        _STATE.stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _STATE.stack.pop()
        assert popped is self
        return False


class _TapeState(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_STATE = _TapeState()


def _active_tape() -> Tape | None:
    return _STATE.stack[-1] if _STATE.stack else None


def _finish_op(op: str, out_data: np.ndarray, inputs, backward_fn) -> Tensor:
    """Wrap an op result, validate finiteness, record on the active tape."""
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced NaN/Inf values")
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(out_data, dtype=np.float64)
    out.requires_grad = needs
    out.grad = None
    tape = _active_tape()
    if tape is not None and needs:
        tape.record(op, out, inputs, backward_fn)
    return out


class GradientSet:
    """Result of :func:`backward`: gradients keyed by tensor identity."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def of(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the loss w.r.t. ``tensor`` (zeros if unreachable)."""
        g = self._grads.get(id(tensor))
        if g is None:
            return np.zeros_like(tensor.data)
        return g

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads


def backward(loss: Tensor, tape: Tape) -> GradientSet:
    """Reverse-accumulate gradients of a scalar loss over a recorded tape.

    Populates ``t.grad`` for every requires_grad tensor the tape watched
    (zeros when the loss does not depend on it) and returns the full set.
    Fan-out accumulates additively; each tape node is visited exactly once.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"loss must be a scalar (1,1,1,1) tensor, got {loss.shape}")
    produced: set[int] = set()
    for entry in tape.entries:
        oid = id(entry.output)
        if oid in produced:
            raise TapeError(f"cycle detected in tape: {entry.op} rewrites a produced tensor")
        if any(id(t) == oid for t in entry.inputs):
            raise TapeError(f"cycle detected in tape: {entry.op} consumes its own output")
        produced.add(oid)

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1, 1, 1))}
    kept: dict[int, np.ndarray] = {id(loss): grads[id(loss)]}
    for entry in reversed(tape.entries):
        gout = grads.pop(id(entry.output), None)
        if gout is None:
            continue
        gins = entry.backward_fn(gout)
        for t, gin in zip(entry.inputs, gins):
            if gin is None or not isinstance(t, Tensor):
                continue
            prev = grads.get(id(t))
            grads[id(t)] = gin if prev is None else prev + gin
            if t.requires_grad:
                kept[id(t)] = grads[id(t)]

    result: dict[int, np.ndarray] = {}
    for tid, t in tape._watched.items():
        g = grads.get(tid)
        if g is None:
            g = kept.get(tid)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g
        result[tid] = g
    # Intermediate requires_grad tensors that were reachable but are not leaves.
    for tid, g in kept.items():
        result.setdefault(tid, g)
    return GradientSet(result)


# ---------------------------------------------------------------------------
# Kernels (pure ndarray functions; shared by autodiff and kernel mode)
# ---------------------------------------------------------------------------


def _conv_out_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _im2col(x: np.ndarray, kernel: int, stride: int, padding: int, dilation: int):
    """Strided sliding-window view of shape (N, C, k, k, Ho, Wo). No copy."""
    n, c, h, w = x.shape
    ho = _conv_out_size(h, kernel, stride, padding, dilation)
    wo = _conv_out_size(w, kernel, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"zero-sized conv output for input {h}x{w}, kernel {kernel}, "
            f"stride {stride}, padding {padding}, dilation {dilation}"
        )
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kernel, kernel, ho, wo),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )
    return view, ho, wo


def conv2d_kernel(x, w, b, stride, padding, dilation):
    """2-D convolution (cross-correlation). ``w`` is (O,C,k,k) or (B,O,C,k,k)
    for per-sample weights; ``b`` is (O,) / (B,O) or None."""
    kernel = w.shape[-1]
    cols, ho, wo = _im2col(x, kernel, stride, padding, dilation)
    if w.ndim == 4:
        out = np.tensordot(w, cols, axes=([1, 2, 3], [1, 2, 3]))  # (O, N, Ho, Wo)
        out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
        if b is not None:
            if b.ndim == 2:  # per-sample bias batch against a shared weight
                out = out + b[:, :, None, None]
            else:
                out += b.reshape(1, -1, 1, 1)
    else:
        # Per-sample weight batches (finite-difference harness).
        if x.shape[0] == 1:
            out = np.einsum("bocuv,cuvhw->bohw", w, cols[0], optimize=True)
        else:
            out = np.einsum("bocuv,bcuvhw->bohw", w, cols, optimize=True)
        if b is not None:
            if b.ndim == 2:
                out += b[:, :, None, None]
            else:
                out += b.reshape(1, -1, 1, 1)
    return out


def conv2d_backward_kernel(x, w, stride, padding, dilation, gout, need_x=True, need_w=True):
    """Gradients of conv2d w.r.t. input, weights and bias."""
    kernel = w.shape[-1]
    cols, ho, wo = _im2col(x, kernel, stride, padding, dilation)
    gw = gd = None
    if need_w:
        gw = np.tensordot(gout, cols, axes=([0, 2, 3], [0, 4, 5]))  # (O, C, k, k)
    if need_x:
        n, c, h, wd_ = x.shape
        hp, wp = h + 2 * padding, wd_ + 2 * padding
        gx_pad = np.zeros((n, c, hp, wp))
        for u in range(kernel):
            for v in range(kernel):
                # (N,O,Ho,Wo) x (O,C) -> (N,Ho,Wo,C)
                t = np.tensordot(gout, w[:, :, u, v], axes=([1], [0]))
                t = t.transpose(0, 3, 1, 2)
                hs = u * dilation
                ws = v * dilation
                gx_pad[:, :, hs : hs + ho * stride : stride, ws : ws + wo * stride : stride] += t
        gd = gx_pad[:, :, padding : padding + h, padding : padding + wd_] if padding else gx_pad
    gb = gout.sum(axis=(0, 2, 3))
    return gd, gw, gb


def relu_kernel(x):
    return np.maximum(x, 0.0)


def maxpool_kernel(x, window, stride, padding):
    """Max pooling; returns (output, flat argmax indices for backward)."""
    n, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if window > hp or window > wp:
        raise ShapeError(f"pool window {window} larger than padded input {hp}x{wp}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                   constant_values=-np.inf)
    ho = (hp - window) // stride + 1
    wo = (wp - window) // stride + 1
    sn, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, ho, wo, window, window),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    flat = view.reshape(n, c, ho, wo, window * window)
    idx = np.argmax(flat, axis=-1)  # first maximum in row-major order on ties
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward_kernel(x_shape, window, stride, padding, idx, gout):
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    gx_pad = np.zeros((n, c, hp, wp))
    _, _, ho, wo = gout.shape
    u = idx // window
    v = idx % window
    hh = np.arange(ho)[None, None, :, None] * stride + u
    ww = np.arange(wo)[None, None, None, :] * stride + v
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    np.add.at(gx_pad, (nn, cc, hh, ww), gout)
    return gx_pad[:, :, padding : padding + h, padding : padding + w] if padding else gx_pad


@lru_cache(maxsize=None)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation matrix (n_out x n_in)."""
    a = np.zeros((n_out, n_in))
    if n_in == 1:
        a[:, 0] = 1.0
        return a
    if n_out == 1:
        a[0, 0] = 1.0
        return a
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(pos.astype(np.int64), n_in - 2)
    frac = pos - i0
    rows = np.arange(n_out)
    a[rows, i0] += 1.0 - frac
    a[rows, i0 + 1] += frac
    return a


def resize_bilinear_kernel(x, out_h, out_w):
    """Corner-aligned bilinear resize of an NCHW array to (out_h, out_w)."""
    _, _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    ah = _interp_matrix(h, out_h)
    aw = _interp_matrix(w, out_w)
    return np.matmul(np.matmul(ah, x), aw.T)


def resize_bilinear_backward_kernel(x_shape, gout):
    _, _, h, w = x_shape
    _, _, oh, ow = gout.shape
    if (h, w) == (oh, ow):
        return gout
    ah = _interp_matrix(h, oh)
    aw = _interp_matrix(w, ow)
    return np.matmul(np.matmul(ah.T, gout), aw)


def sigmoid_kernel(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    # log(1 + exp(x)) without overflow
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def bce_with_logits_kernel(logits, gt, per_sample=False):
    """Pixel-mean binary cross-entropy from logits.

    With ``per_sample`` returns a length-B vector of per-sample means.
    """
    terms = _softplus(logits) - gt * logits
    if per_sample:
        return terms.mean(axis=(1, 2, 3))
    return terms.mean()


def _balance_weights(gt):
    """Per-sample class-balancing weights: beta on positives, 1-beta on
    negatives with beta = negative fraction; plain 1/M everywhere when a
    sample has no positives (degenerate fallback)."""
    b = gt.shape[0]
    m = gt[0].size
    pos = gt.reshape(b, -1).sum(axis=1)
    beta = (m - pos) / m
    wpos = beta.reshape(b, 1, 1, 1)
    wneg = (1.0 - beta).reshape(b, 1, 1, 1)
    w = np.where(gt > 0.5, wpos, wneg)
    degenerate = pos == 0
    if np.any(degenerate):
        w[degenerate] = 1.0 / m
    return w


def class_balanced_bce_with_logits_kernel(logits, gt, per_sample=False):
    """Class-balanced BCE from logits: beta-weighted sum over pixels,
    totalled over the batch. Samples without positives fall back to the
    pixel mean of the negative terms."""
    w = _balance_weights(gt)
    terms = w * (_softplus(logits) - gt * logits)
    if per_sample:
        return terms.sum(axis=(1, 2, 3))
    return terms.sum(axis=(1, 2, 3)).sum()


# ---------------------------------------------------------------------------
# Autodiff ops
# ---------------------------------------------------------------------------


@dataclass
class ConvParams:
    """Parameters of one convolution layer."""

    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    weights: Tensor = None
    bias: Tensor | None = None

    def __post_init__(self):
        if self.out_channels < 1 or self.kernel < 1 or self.stride < 1 or self.dilation < 1:
            raise ShapeError("conv parameters must be positive")
        if self.padding < 0:
            raise ShapeError("conv padding must be nonnegative")
        w = self.weights
        if w is None or w.shape[0] != self.out_channels or w.shape[2] != self.kernel \
                or w.shape[3] != self.kernel:
            got = None if w is None else w.shape
            raise ShapeError(
                f"conv weights must have shape ({self.out_channels}, in_channels, "
                f"{self.kernel}, {self.kernel}); got {got}"
            )
        if self.bias is not None and self.bias.shape != (1, self.out_channels, 1, 1):
            raise ShapeError(
                f"conv bias must have shape (1, {self.out_channels}, 1, 1); got {self.bias.shape}"
            )

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    if x.shape[1] != params.in_channels:
        raise ShapeError(
            f"conv input has {x.shape[1]} channels, weights expect {params.in_channels}"
        )
    w = params.weights
    b = params.bias
    bdat = None if b is None else b.data.reshape(-1)
    out = conv2d_kernel(x.data, w.data, bdat, params.stride, params.padding, params.dilation)

    xd, wd = x.data, w.data
    stride, padding, dilation = params.stride, params.padding, params.dilation

    def _bw(gout):
        need_x = x.requires_grad
        need_w = w.requires_grad
        gx, gw, gb = conv2d_backward_kernel(xd, wd, stride, padding, dilation, gout,
                                            need_x=need_x, need_w=need_w)
        gb_t = None
        if b is not None and b.requires_grad:
            gb_t = gb.reshape(1, -1, 1, 1)
        return [gx, gw, gb_t]

    inputs = [x, w] + ([b] if b is not None else [])

    def _bw_full(gout):
        gs = _bw(gout)
        return gs if b is not None else gs[:2]

    return _finish_op("conv2d", out, inputs, _bw_full)


def relu(x: Tensor) -> Tensor:
    out = relu_kernel(x.data)
    mask = x.data > 0

    def _bw(gout):
        return [gout * mask]

    return _finish_op("relu", out, [x], _bw)


def max_pool2d(x: Tensor, window: int, stride: int, padding: int = 0) -> Tensor:
    if window < 1 or stride < 1:
        raise ShapeError("pool window and stride must be >= 1")
    out, idx = maxpool_kernel(x.data, window, stride, padding)
    x_shape = x.shape

    def _bw(gout):
        return [maxpool_backward_kernel(x_shape, window, stride, padding, idx, gout)]

    return _finish_op("max_pool2d", out, [x], _bw)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ShapeError("upsample factor must be a positive integer")
    if factor == 1:
        def _bw_id(gout):
            return [gout]
        return _finish_op("upsample_bilinear", x.data, [x], _bw_id)
    _, _, h, w = x.shape
    out = resize_bilinear_kernel(x.data, h * factor, w * factor)
    x_shape = x.shape

    def _bw(gout):
        return [resize_bilinear_backward_kernel(x_shape, gout)]

    return _finish_op("upsample_bilinear", out, [x], _bw)


def sum_n(inputs: Sequence[Tensor]) -> Tensor:
    if len(inputs) < 1:
        raise ShapeError("sum_n needs at least one input")
    shape = inputs[0].shape
    for t in inputs[1:]:
        if t.shape != shape:
            raise ShapeError(f"sum_n shape mismatch: {t.shape} vs {shape}")
    out = inputs[0].data.copy()
    for t in inputs[1:]:
        out += t.data

    def _bw(gout):
        return [gout] * len(inputs)

    return _finish_op("sum_n", out, list(inputs), _bw)


def sigmoid(x: Tensor) -> Tensor:
    out = sigmoid_kernel(x.data)

    def _bw(gout):
        return [gout * out * (1.0 - out)]

    return _finish_op("sigmoid", out, [x], _bw)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if len(inputs) < 1:
        raise ShapeError("concat_channels needs at least one input")
    base = inputs[0].shape
    for t in inputs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (base[0], base[2], base[3]):
            raise ShapeError("concat_channels inputs must agree on batch and spatial dims")
    out = np.concatenate([t.data for t in inputs], axis=1)
    sizes = [t.shape[1] for t in inputs]

    def _bw(gout):
        splits = np.split(gout, np.cumsum(sizes)[:-1], axis=1)
        return list(splits)

    return _finish_op("concat_channels", out, list(inputs), _bw)


def reduce_sum(x: Tensor) -> Tensor:
    out = np.full((1, 1, 1, 1), x.data.sum())
    x_shape = x.shape

    def _bw(gout):
        return [np.broadcast_to(gout, x_shape) * np.ones(x_shape)]

    return _finish_op("reduce_sum", out, [x], _bw)


def bce_with_logits(logits: Tensor, gt: Tensor) -> Tensor:
    """Fused sigmoid + binary cross-entropy, pixel-mean reduction."""
    if logits.shape != gt.shape:
        raise ShapeError(f"loss shape mismatch: {logits.shape} vs {gt.shape}")
    out = np.full((1, 1, 1, 1), bce_with_logits_kernel(logits.data, gt.data))
    zd, yd = logits.data, gt.data

    def _bw(gout):
        gz = (sigmoid_kernel(zd) - yd) / zd.size * gout.reshape(())
        return [gz, None]

    return _finish_op("bce_with_logits", out, [logits, gt], _bw)


def class_balanced_bce_with_logits(logits: Tensor, gt: Tensor) -> Tensor:
    """Fused class-balanced BCE: weighted pixel sum over the whole batch."""
    if logits.shape != gt.shape:
        raise ShapeError(f"loss shape mismatch: {logits.shape} vs {gt.shape}")
    out = np.full((1, 1, 1, 1), class_balanced_bce_with_logits_kernel(logits.data, gt.data))
    zd, yd = logits.data, gt.data
    w = _balance_weights(yd)

    def _bw(gout):
        gz = w * (sigmoid_kernel(zd) - yd) * gout.reshape(())
        return [gz, None]

    return _finish_op("class_balanced_bce_with_logits", out, [logits, gt], _bw)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], float], at: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a tensor-to-scalar function.

    ``f`` may return a float or a scalar Tensor. One forward pair per element,
    so keep inputs small; this is the test oracle, not a training path.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def _eval(arr):
        r = f(Tensor(arr))
        if isinstance(r, Tensor):
            return float(r.data.reshape(()))
        return float(r)

    base = at.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        plus = base.copy().reshape(-1)
        minus = base.copy().reshape(-1)
        plus[i] += eps
        minus[i] -= eps
        flat[i] = (_eval(plus.reshape(base.shape)) - _eval(minus.reshape(base.shape))) / (2 * eps)
    return Tensor(grad)
