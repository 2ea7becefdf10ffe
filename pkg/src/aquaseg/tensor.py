"""4-D float tensors with reverse-mode automatic differentiation.

Everything the networks consume lives here: the ``Tensor4`` value type
(batch, channel, height, width), a recording tape replayed in reverse by
:func:`backward`, the convolution / pooling / resampling primitives with
their gradients, elementwise arithmetic, and a central finite-difference
oracle for verifying the whole thing.

Training runs in float32. Verification suites construct float64 tensors
(``dtype=np.float64``); every op preserves the dtype of its inputs, and
mixing dtypes in one op is an error. The only broadcast anywhere is the
per-channel bias inside :func:`conv2d`.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

DEFAULT_DTYPE = np.float32
SIGMOID_EPS = 1e-7
_LOG_FLOOR = 1e-30

_node_ids = itertools.count()


class Tensor4:
    """A (n, c, h, w) float tensor, optionally tracked on the autodiff tape.

    ``grad`` is populated on requires-grad leaves by :func:`backward` and
    accumulates additively across calls until the caller resets it.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(
            np.asarray(data, dtype=DEFAULT_DTYPE if dtype is None else dtype)
        )
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 requires 4 dims (n, c, h, w), got shape {arr.shape}")
        if arr.size == 0:
            raise ShapeError(f"Tensor4 dims must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self._leaf = True

    @classmethod
    def _from_data(cls, arr: np.ndarray) -> "Tensor4":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node_id = next(_node_ids)
        t._leaf = True
        return t

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor4":
        """Copy of the value, off the tape, no grad."""
        return Tensor4._from_data(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor4(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar: tensor-tensor ops demand identical shapes, scalars
    # are plain Python numbers
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor4) else add_scalar(self, float(other))

    def __radd__(self, other):
        return add_scalar(self, float(other))

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor4) else add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor4) else scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor4) else scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)


class AutodiffGraph:
    """Recording tape. Entries are appended in forward (topological) order
    and replayed in exact reverse order by :func:`backward`."""

    def __init__(self):
        self.entries: list[tuple[int, Callable]] = []


_graph = AutodiffGraph()
_recording = True


def active_graph() -> AutodiffGraph:
    return _graph


def reset_graph() -> None:
    """Drop every recorded entry (frees saved forward values)."""
    _graph.entries.clear()


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


def _tracked(inputs) -> bool:
    return _recording and any(t.requires_grad for t in inputs)


def _record(out: Tensor4, backward_fn: Callable) -> None:
    out.requires_grad = True
    out._leaf = False
    _graph.entries.append((out.node_id, backward_fn))


def backward(loss: Tensor4) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    Repeated calls without resetting leaf grads accumulate additively.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ContractError(f"backward expects a (1,1,1,1) scalar, got shape {loss.shape}")
    adjoints: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for out_id, backward_fn in reversed(_graph.entries):
        g = adjoints.pop(out_id, None)
        if g is None:
            continue
        for tensor, contrib in backward_fn(g):
            if tensor._leaf:
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)
                tensor.grad += contrib
            else:
                prev = adjoints.get(tensor.node_id)
                adjoints[tensor.node_id] = contrib if prev is None else prev + contrib


# ---------------------------------------------------------------------------
# validation helpers

def _check_same_dtype(*tensors: Tensor4) -> None:
    first = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != first:
            raise ContractError(f"mixed tensor dtypes: {first} vs {t.data.dtype}")


def _check_same_shape(a: Tensor4, b: Tensor4, opname: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ")


def _check_positive_int(value, name: str, minimum: int = 1) -> None:
    if not isinstance(value, int) or value < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")


# ---------------------------------------------------------------------------
# elementwise and reduction ops

def add(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_shape(a, b, "add")
    _check_same_dtype(a, b)
    out = Tensor4._from_data(a.data + b.data)
    if _tracked((a, b)):
        def bwd(g):
            grads = []
            if a.requires_grad:
                grads.append((a, g))
            if b.requires_grad:
                grads.append((b, g))
            return grads
        _record(out, bwd)
    return out


def sub(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_shape(a, b, "sub")
    _check_same_dtype(a, b)
    out = Tensor4._from_data(a.data - b.data)
    if _tracked((a, b)):
        def bwd(g):
            grads = []
            if a.requires_grad:
                grads.append((a, g))
            if b.requires_grad:
                grads.append((b, -g))
            return grads
        _record(out, bwd)
    return out


def mul(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_shape(a, b, "mul")
    _check_same_dtype(a, b)
    out = Tensor4._from_data(a.data * b.data)
    if _tracked((a, b)):
        a_data, b_data = a.data, b.data
        def bwd(g):
            grads = []
            if a.requires_grad:
                grads.append((a, g * b_data))
            if b.requires_grad:
                grads.append((b, g * a_data))
            return grads
        _record(out, bwd)
    return out


def div(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_shape(a, b, "div")
    _check_same_dtype(a, b)
    if np.any(b.data == 0):
        raise ContractError("div: denominator contains zero")
    out = Tensor4._from_data(a.data / b.data)
    if _tracked((a, b)):
        a_data, b_data = a.data, b.data
        def bwd(g):
            grads = []
            if a.requires_grad:
                grads.append((a, g / b_data))
            if b.requires_grad:
                grads.append((b, -g * a_data / (b_data * b_data)))
            return grads
        _record(out, bwd)
    return out


def neg(a: Tensor4) -> Tensor4:
    out = Tensor4._from_data(-a.data)
    if _tracked((a,)):
        _record(out, lambda g: [(a, -g)])
    return out


def scale(a: Tensor4, c: float) -> Tensor4:
    c = float(c)
    out = Tensor4._from_data(a.data * c)
    if _tracked((a,)):
        _record(out, lambda g: [(a, g * c)])
    return out


def add_scalar(a: Tensor4, c: float) -> Tensor4:
    c = float(c)
    out = Tensor4._from_data(a.data + c)
    if _tracked((a,)):
        _record(out, lambda g: [(a, g)])
    return out


def log(a: Tensor4) -> Tensor4:
    """Natural log, floored at 1e-30 so finite inputs never produce -inf."""
    safe = np.maximum(a.data, _LOG_FLOOR)
    out = Tensor4._from_data(np.log(safe))
    if _tracked((a,)):
        mask = (a.data > _LOG_FLOOR).astype(a.data.dtype)
        _record(out, lambda g: [(a, g * mask / safe)])
    return out


def relu(a: Tensor4) -> Tensor4:
    out = Tensor4._from_data(np.maximum(a.data, 0))
    if _tracked((a,)):
        gate = a.data > 0  # derivative 0 at exactly 0
        _record(out, lambda g: [(a, g * gate)])
    return out


def sigmoid(a: Tensor4) -> Tensor4:
    """Logistic function clamped to [1e-7, 1-1e-7] for downstream log safety."""
    d = a.data
    z = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    np.clip(s, SIGMOID_EPS, 1.0 - SIGMOID_EPS, out=s)
    out = Tensor4._from_data(s)
    if _tracked((a,)):
        _record(out, lambda g: [(a, g * s * (1.0 - s))])
    return out


def activation(a: Tensor4, kind: str) -> Tensor4:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ConfigError(f"unknown activation kind {kind!r} (expected 'relu' or 'sigmoid')")


def sum_all(a: Tensor4) -> Tensor4:
    out = Tensor4._from_data(np.asarray(a.data.sum(), dtype=a.data.dtype).reshape(1, 1, 1, 1))
    if _tracked((a,)):
        shape, dtype = a.shape, a.data.dtype
        _record(out, lambda g: [(a, np.full(shape, g.reshape(-1)[0], dtype=dtype))])
    return out


def mean_all(a: Tensor4) -> Tensor4:
    out = Tensor4._from_data(np.asarray(a.data.mean(), dtype=a.data.dtype).reshape(1, 1, 1, 1))
    if _tracked((a,)):
        shape, dtype = a.shape, a.data.dtype
        count = a.data.size
        _record(out, lambda g: [(a, np.full(shape, g.reshape(-1)[0] / count, dtype=dtype))])
    return out


# ---------------------------------------------------------------------------
# spatial ops

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[:, :, a, b] = xp[:, :, a : a + stride * oh : stride, b : b + stride * ow : stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)


def _col2im(dcols: np.ndarray, xp_shape, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = xp_shape
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    dc = dcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for a in range(kh):
        for b in range(kw):
            dxp[:, :, a : a + stride * oh : stride, b : b + stride * ow : stride] += dc[:, :, a, b]
    return dxp


def conv2d(x: Tensor4, weight: Tensor4, bias: Tensor4 | None = None,
           stride: int = 1, padding: int = 0) -> Tensor4:
    """2-D cross-correlation with zero padding.

    ``weight`` is (out_c, in_c, kh, kw); ``bias`` is a per-output-channel
    vector stored as (1, out_c, 1, 1), the one broadcast this library allows.
    Implemented as im2col + one matmul so the per-output summation order is
    fixed by the BLAS kernel for a given shape.
    """
    _check_positive_int(stride, "stride", 1)
    _check_positive_int(padding, "padding", 0)
    out_c, w_in_c, kh, kw = weight.shape
    n, c, h, w = x.shape
    if c != w_in_c:
        raise ShapeError(f"conv2d: input shape {x.shape} has {c} channels but weight "
                         f"shape {weight.shape} expects {w_in_c}")
    inputs = [x, weight]
    if bias is not None:
        if bias.shape != (1, out_c, 1, 1):
            raise ShapeError(f"conv2d: bias shape {bias.shape} must be (1, {out_c}, 1, 1)")
        inputs.append(bias)
    _check_same_dtype(*inputs)
    span_h = h + 2 * padding - kh
    span_w = w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ConfigError(
            f"conv2d: output dims ((h+2p-kh)/stride+1) are not positive integers for "
            f"input {x.shape}, kernel ({kh},{kw}), stride {stride}, padding {padding}")
    oh = span_h // stride + 1
    ow = span_w // stride + 1
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = weight.data.reshape(out_c, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, oh, ow, out_c).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out)
    res = Tensor4._from_data(out)
    if _tracked(inputs):
        def bwd(g):
            grads = []
            gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, out_c)
            if weight.requires_grad:
                # recompute the column matrix instead of keeping it alive
                cols_b = _im2col(xp, kh, kw, stride, oh, ow)
                grads.append((weight, (gmat.T @ cols_b).reshape(out_c, c, kh, kw)))
            if x.requires_grad:
                dxp = _col2im(gmat @ wmat, xp.shape, kh, kw, stride, oh, ow)
                dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
                grads.append((x, np.ascontiguousarray(dx)))
            if bias is not None and bias.requires_grad:
                grads.append((bias, g.sum(axis=(0, 2, 3)).reshape(1, out_c, 1, 1)))
            return grads
        _record(res, bwd)
    return res


def conv_transpose2d(x: Tensor4, weight: Tensor4, stride: int = 1) -> Tensor4:
    """Transposed convolution; the exact adjoint of a stride-``stride``,
    zero-padding conv2d when the same weight array is read as
    (in_c, out_c, kh, kw). Output spatial dims are (in-1)*stride + k."""
    _check_positive_int(stride, "stride", 1)
    w_in_c, out_c, kh, kw = weight.shape
    n, c, h, w = x.shape
    if c != w_in_c:
        raise ShapeError(f"conv_transpose2d: input shape {x.shape} has {c} channels but "
                         f"weight shape {weight.shape} expects {w_in_c}")
    _check_same_dtype(x, weight)
    oh = (h - 1) * stride + kh
    ow = (w - 1) * stride + kw
    xt = np.tensordot(x.data, weight.data, axes=([1], [0]))  # (n, h, w, out_c, kh, kw)
    out = np.zeros((n, out_c, oh, ow), dtype=x.data.dtype)
    for a in range(kh):
        for b in range(kw):
            out[:, :, a : a + (h - 1) * stride + 1 : stride,
                b : b + (w - 1) * stride + 1 : stride] += \
                xt[:, :, :, :, a, b].transpose(0, 3, 1, 2)
    res = Tensor4._from_data(out)
    if _tracked((x, weight)):
        def bwd(g):
            grads = []
            if x.requires_grad:
                dx = np.zeros_like(x.data)
                for a in range(kh):
                    for b in range(kw):
                        gs = g[:, :, a : a + (h - 1) * stride + 1 : stride,
                               b : b + (w - 1) * stride + 1 : stride]
                        dx += np.tensordot(gs, weight.data[:, :, a, b],
                                           axes=([1], [1])).transpose(0, 3, 1, 2)
                grads.append((x, dx))
            if weight.requires_grad:
                gw = np.zeros_like(weight.data)
                for a in range(kh):
                    for b in range(kw):
                        gs = g[:, :, a : a + (h - 1) * stride + 1 : stride,
                               b : b + (w - 1) * stride + 1 : stride]
                        gw[:, :, a, b] = np.tensordot(x.data, gs, axes=([0, 2, 3], [0, 2, 3]))
                grads.append((weight, gw))
            return grads
        _record(res, bwd)
    return res


def maxpool2d(x: Tensor4, k: int = 2) -> Tensor4:
    """k×k max pooling; gradient routes to the first maximum of each window
    in row-major scan order."""
    _check_positive_int(k, "k", 1)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool2d: spatial dims of {x.shape} not divisible by k={k}")
    oh, ow = h // k, w // k
    windows = x.data.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5)
    windows = np.ascontiguousarray(windows).reshape(n, c, oh, ow, k * k)
    out = windows.max(axis=-1)
    res = Tensor4._from_data(out)
    if _tracked((x,)):
        arg = windows.argmax(axis=-1)  # first max in row-major window order
        def bwd(g):
            dw = np.zeros((n, c, oh, ow, k * k), dtype=g.dtype)
            np.put_along_axis(dw, arg[..., None], g[..., None], axis=-1)
            dx = dw.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            return [(x, np.ascontiguousarray(dx))]
        _record(res, bwd)
    return res


def upsample_nearest(x: Tensor4, factor: int) -> Tensor4:
    """Replicate every pixel into a factor×factor block."""
    _check_positive_int(factor, "factor", 1)
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    res = Tensor4._from_data(out)
    if _tracked((x,)):
        def bwd(g):
            return [(x, g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))]
        _record(res, bwd)
    return res


def block_mean(arr: np.ndarray, factor: int) -> np.ndarray:
    """Mean over factor×factor blocks of the trailing two axes.

    Accumulates in float64 and returns float64; that makes
    ``avgpool_downsample(upsample_nearest(x, f), f) == x`` exact because the
    sum of f² identical values divided by f² reproduces the value.
    """
    *lead, h, w = arr.shape
    oh, ow = h // factor, w // factor
    blocks = arr.reshape(*lead, oh, factor, ow, factor).astype(np.float64)
    return blocks.mean(axis=(-3, -1))


def avgpool_downsample(x: Tensor4, factor: int) -> Tensor4:
    """Each output pixel is the mean of its factor×factor block."""
    _check_positive_int(factor, "factor", 1)
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"avgpool_downsample: spatial dims of {x.shape} not divisible "
                         f"by factor={factor}")
    out = block_mean(x.data, factor).astype(x.data.dtype)
    res = Tensor4._from_data(out)
    if _tracked((x,)):
        inv = 1.0 / (factor * factor)
        def bwd(g):
            return [(x, (g * inv).repeat(factor, axis=2).repeat(factor, axis=3))]
        _record(res, bwd)
    return res


def concat_channels(a: Tensor4, b: Tensor4) -> Tensor4:
    """Concatenate along the channel axis, a's channels first."""
    if a.n != b.n or a.h != b.h or a.w != b.w:
        raise ShapeError(f"concat_channels: batch/spatial dims of {a.shape} and {b.shape} differ")
    _check_same_dtype(a, b)
    out = np.concatenate([a.data, b.data], axis=1)
    res = Tensor4._from_data(out)
    if _tracked((a, b)):
        ac = a.c
        def bwd(g):
            grads = []
            if a.requires_grad:
                grads.append((a, np.ascontiguousarray(g[:, :ac])))
            if b.requires_grad:
                grads.append((b, np.ascontiguousarray(g[:, ac:])))
            return grads
        _record(res, bwd)
    return res


# ---------------------------------------------------------------------------
# verification oracle

def finite_difference_grad(f: Callable[[Tensor4], Tensor4 | float], x: Tensor4,
                           eps: float = 1e-4) -> Tensor4:
    """Central differences (f(x+εe) - f(x-εe)) / 2ε, one element at a time.

    ``f`` must be deterministic; it is evaluated with tape recording off.
    """
    def scalar_of(value) -> float:
        return value.item() if isinstance(value, Tensor4) else float(value)

    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = scalar_of(f(x))
            flat[i] = orig - eps
            fm = scalar_of(f(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
    return Tensor4._from_data(grad)
