"""Dense tensors with tape-based reverse-mode differentiation.

Operations are recorded on the active :class:`Tape` whenever at least one
input requires a gradient.  Outside a tape everything runs as plain numpy,
which is how inference and the frozen-encoder statistics are computed.

>>> x = Tensor([3.0], requires_grad=True)
>>> with Tape() as tape:
...     loss = (x * x).sum()
>>> backward(tape, loss)[x]
array([6.])
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from . import _kernels

STD_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised on incompatible tensor dimensions."""


_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of primitive operations for one differentiation pass.

    Use as a context manager; the tape is thread-local and single-writer.
    """

    def __init__(self):
        self.nodes: list[tuple] = []
        self._prev = None

    def __enter__(self):
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: "Tensor", parents: Sequence["Tensor"], backward_fn: Callable, name: str):
        self.nodes.append((out, tuple(parents), backward_fn, name))


class no_tape:
    """Context manager that suspends recording (e.g. for frozen statistics)."""

    def __enter__(self):
        self._prev = _active_tape()
        _state.tape = None

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False


class Tensor:
    """An n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tracked")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        # leaves are tracked iff requires_grad; op outputs get this set on record
        self._tracked = requires_grad

    # -- array protocol --------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.shape[0]

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str):
    # one reduction is far cheaper than an elementwise mask; confirm on failure
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def _make(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(p._tracked for p in parents):
        out._tracked = True
        tape.record(out, parents, backward_fn, op)
    return out


def _coerce(a, b):
    """Wrap constants so they match the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data

    def bw(g, needs):
        return (_unbroadcast(g * bd, ad.shape) if needs[0] else None,
                _unbroadcast(g * ad, bd.shape) if needs[1] else None)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g, needs):
        ga = _unbroadcast(g / bd, ad.shape) if needs[0] else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if needs[1] else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g, needs: (0.5 * g / out,), "sqrt")


def tabs(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g, needs: (g * sgn,), "abs")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,),
                 lambda g, needs: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _make(x.data * scale, (x,), lambda g, needs: (g * scale,), "leaky_relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g, needs: (g * (1 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    out = out.astype(x.dtype)
    return _make(out, (x,), lambda g, needs: (g * out * (1 - out),), "sigmoid")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g, needs: (g * mask,), "clamp")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def bw(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    shape = x.shape

    def bw(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).astype(x.dtype),)

    return _make(np.asarray(x.data.mean(axis=axes, keepdims=keepdims)), (x,), bw, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g, needs: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g, needs: (g.transpose(inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), xs, bw, "concat")


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``start:stop`` along ``axis``."""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape, dtype = x.shape, x.dtype

    def bw(g, needs):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[index]), (x,), bw, "narrow")


def split(x: Tensor, n: int, axis: int = 1) -> list[Tensor]:
    """Split into ``n`` equal chunks along ``axis``."""
    size = x.shape[axis]
    if size % n:
        raise ShapeError(f"cannot split axis {axis} of size {size} into {n} equal parts")
    step = size // n
    return [narrow(x, axis, i * step, (i + 1) * step) for i in range(n)]


def take(x: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Gather entries of ``x`` along ``axis`` (duplicates accumulate in backward)."""
    index = np.asarray(index, dtype=np.intp)
    shape, dtype = x.shape, x.dtype

    def bw(g, needs):
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(np.take(x.data, index, axis=axis), (x,), bw, "take")


def take_along(x: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """``np.take_along_axis`` with gradient (duplicate indices accumulate)."""
    index = np.asarray(index, dtype=np.intp)
    shape, dtype = x.shape, x.dtype

    def bw(g, needs):
        full = np.zeros(shape, dtype=dtype)
        grids = list(np.indices(index.shape, sparse=True))
        grids[axis % len(shape)] = index
        np.add.at(full, tuple(grids), g)
        return (full,)

    return _make(np.take_along_axis(x.data, index, axis=axis), (x,), bw, "take_along")


def extract_patches(x: Tensor, tops: Sequence[int], lefts: Sequence[int], size: int) -> Tensor:
    """Square patches of an (N, C, H, W) map -> (N, P, C, size*size)."""
    n, c, h, w = x.shape
    if size > h or size > w:
        raise ShapeError(f"patch size {size} exceeds feature map {h}x{w}")
    tops, lefts = list(tops), list(lefts)
    for t, l in zip(tops, lefts):
        if not (0 <= t <= h - size and 0 <= l <= w - size):
            raise ShapeError(f"patch at ({t}, {l}) leaves the {h}x{w} map")
    out = np.stack([x.data[:, :, t:t + size, l:l + size].reshape(n, c, size * size)
                    for t, l in zip(tops, lefts)], axis=1)
    dtype = x.dtype

    def bw(g, needs):
        full = np.zeros((n, c, h, w), dtype=dtype)
        for p, (t, l) in enumerate(zip(tops, lefts)):
            full[:, :, t:t + size, l:l + size] += g[:, p].reshape(n, c, size, size)
        return (full,)

    return _make(out, (x,), bw, "extract_patches")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (equal batch shapes)."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data

    def bw(g, needs):
        ga = g @ np.swapaxes(bd, -1, -2) if needs[0] else None
        gb = np.swapaxes(ad, -1, -2) @ g if needs[1] else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully connected layer ``x @ weight.T + bias`` for x of shape (N, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g, needs):
        gx = g @ wd if needs[0] else None
        gw = g.T @ xd if needs[1] else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=0) if needs[2] else None)
        return tuple(grads)

    return _make(out, parents, bw, "linear")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is (C_in, H, W) or (N, C_in, H, W); ``weight`` is (C_out, C_in, k, k).
    Output spatial size is ``floor((H + 2*padding - k) / stride) + 1``.
    """
    squeeze_batch = x.ndim == 3
    if squeeze_batch:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 3-D/4-D input and 4-D kernel, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ci}")
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {k}x{k2}")
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {hp}x{wp}")

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _kernels.im2col(xp, k, stride, ho, wo)
    w2 = weight.data.reshape(o, c * k * k)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g, needs):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gx = gw = gb = None
        if needs[0]:
            dcols = w2.T @ g2
            gxp = _kernels.col2im(dcols, (n, c, hp, wp), k, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if needs[1]:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and needs[2]:
            gb = g2.sum(axis=1)
        return (gx, gw) if bias is None else (gx, gw, gb)

    out_t = _make(out, parents, bw, "conv2d")
    if squeeze_batch:
        out_t = reshape(out_t, out_t.shape[1:])
    return out_t


# ---------------------------------------------------------------------------
# statistics and norms
# ---------------------------------------------------------------------------


def channel_stats(x: Tensor, eps: float = STD_EPS) -> tuple[Tensor, Tensor]:
    """Per-channel spatial mean and population std ``sqrt(var + eps)``.

    Accepts (C, H, W) -> (C,) or (N, C, H, W) -> (N, C).
    """
    if x.ndim not in (3, 4):
        raise ShapeError(f"channel_stats expects (C,H,W) or (N,C,H,W), got {x.shape}")
    axes = (-2, -1)
    mu = mean(x, axis=axes, keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axis=axes, keepdims=True)
    sigma = sqrt(var + eps)
    out_shape = x.shape[:-2]
    return reshape(mu, out_shape), reshape(sigma, out_shape)


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(-2, -1))


def l1_norm(x: Tensor, axis=None) -> Tensor:
    return tsum(tabs(x), axis=axis)


def l2_norm(x: Tensor, axis=None, eps: float = 0.0) -> Tensor:
    return sqrt(tsum(x * x, axis=axis) + eps)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> dict:
    """Replay the tape in reverse; returns ``{leaf: grad}`` for tracked leaves.

    Gradients are also accumulated into ``leaf.grad``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for out, parents, fn, name in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        needs = tuple(p._tracked for p in parents)
        pgrads = fn(g, needs)
        for p, pg, need in zip(parents, pgrads, needs):
            if not need or pg is None:
                continue
            if p.requires_grad:
                leaves[id(p)] = p
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    result = {}
    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=leaf.dtype)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {leaf.name or 'parameter'}")
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result
