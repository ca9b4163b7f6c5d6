"""Dense-array tensor core with reverse-mode differentiation.

Tensors are immutable numpy-backed values (float32 or float64). While a
Tape is active, every operation appends one node holding the backward rule,
so a single reversed traversal yields gradients for all leaves. Broadcasting
follows trailing-dimension rules only; dtype mixing is rejected rather than
silently promoted, and any non-finite result raises immediately.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)
_uid_counter = itertools.count(1)


class TensorError(Exception):
    pass


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


class Tensor:
    """Immutable dense array. Do not mutate ``.data`` after construction."""

    __slots__ = ("data", "uid")

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype, order="C")
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        _check_finite(arr, "Tensor()")
        arr.flags.writeable = False
        self.data = arr
        self.uid = next(_uid_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name})"

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
        return neg(self)


def _wrap(arr: np.ndarray, op: str) -> Tensor:
    """Internal fast path: wrap a freshly produced array without copying."""
    _check_finite(arr, op)
    t = Tensor.__new__(Tensor)
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    t.data = arr
    t.uid = next(_uid_counter)
    return t


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


class Node:
    """One recorded operation: output ids, input ids, and the backward rule."""

    __slots__ = ("op", "in_uids", "out_uids", "backward")

    def __init__(self, op: str, in_uids, out_uids, backward):
        self.op = op
        self.in_uids = in_uids
        self.out_uids = out_uids
        self.backward = backward


_tape_stack: list["Tape"] = []


class Tape:
    """Recording of forward operations, replayable in reverse for gradients."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack.pop()
        assert popped is self

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar loss for each tensor in ``wrt``.

        Leaves the loss never touched receive zeros of their own shape.
        """
        grads = backward(self, loss)
        out = []
        for t in wrt:
            g = grads.get(t.uid)
            if g is None:
                g = np.zeros_like(t.data)
            out.append(g)
        return out


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def record(op: str, inputs: Sequence[Tensor], outputs: Sequence[Tensor],
           backward_fn: Callable) -> None:
    """Append a node to the active tape, if any.

    ``backward_fn`` receives one gradient array per output (``None`` when an
    output does not influence the loss) and returns one gradient array per
    input (``None`` to skip).
    """
    tape = active_tape()
    if tape is None:
        return
    tape.nodes.append(Node(
        op,
        tuple(t.uid for t in inputs),
        tuple(t.uid for t in outputs),
        backward_fn,
    ))


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse traversal of the tape from a scalar loss.

    Returns gradient arrays keyed by tensor uid. Each node is visited exactly
    once, in reverse construction order; gradients accumulate with ``+=`` so
    tensors feeding several consumers are handled correctly.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    produced = set()
    for node in tape.nodes:
        produced.update(node.out_uids)
    if loss.uid not in produced:
        raise TensorError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        gouts = tuple(grads.get(uid) for uid in node.out_uids)
        if all(g is None for g in gouts):
            continue
        gins = node.backward(*gouts)
        for uid, g in zip(node.in_uids, gins):
            if g is None:
                continue
            acc = grads.get(uid)
            if acc is None:
                grads[uid] = g.copy() if g.base is not None or g.flags.writeable is False else g
            else:
                if not acc.flags.writeable:
                    acc = acc.copy()
                acc += g
                grads[uid] = acc
    return grads


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    if a.dtype != b.dtype:
        raise TensorError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def zeros(shape, dtype=np.float32) -> Tensor:
    return _wrap(np.zeros(shape, dtype=dtype), "zeros")


def ones(shape, dtype=np.float32) -> Tensor:
    return _wrap(np.ones(shape, dtype=dtype), "ones")


def full(shape, value, dtype=np.float32) -> Tensor:
    return _wrap(np.full(shape, value, dtype=dtype), "full")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = _wrap(a.data + b.data, "add")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    record("add", (a, b), (out,), bwd)
    return out


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = _wrap(a.data - b.data, "sub")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    record("sub", (a, b), (out,), bwd)
    return out


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = _wrap(a.data * b.data, "mul")

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    record("mul", (a, b), (out,), bwd)
    return out


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = _wrap(a.data / b.data, "div")

    def bwd(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    record("div", (a, b), (out,), bwd)
    return out


def neg(a: Tensor) -> Tensor:
    out = _wrap(-a.data, "neg")
    record("neg", (a,), (out,), lambda g: (-g,))
    return out


def absval(a: Tensor) -> Tensor:
    out = _wrap(np.abs(a.data), "abs")
    sign = np.sign(a.data)
    record("abs", (a,), (out,), lambda g: (g * sign,))
    return out


def exp(a: Tensor) -> Tensor:
    out = _wrap(np.exp(a.data), "exp")
    record("exp", (a,), (out,), lambda g: (g * out.data,))
    return out


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise TensorError("sqrt of negative value")
    out = _wrap(np.sqrt(a.data), "sqrt")
    record("sqrt", (a,), (out,), lambda g: (g * (0.5 / out.data),))
    return out


def sigmoid(a: Tensor) -> Tensor:
    # stable two-sided form
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = _wrap(y, "sigmoid")
    record("sigmoid", (a,), (out,), lambda g: (g * out.data * (1.0 - out.data),))
    return out


def elu(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
    out = _wrap(y.astype(x.dtype, copy=False), "elu")

    def bwd(g):
        return (g * np.where(x > 0, 1.0, y + 1.0).astype(x.dtype, copy=False),)

    record("elu", (a,), (out,), bwd)
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = _wrap(np.clip(a.data, lo, hi), "clamp")
    inside = ((a.data > lo) & (a.data < hi)).astype(a.data.dtype)
    record("clamp", (a,), (out,), lambda g: (g * inside,))
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _wrap(a.data.sum(axis=axis, keepdims=keepdims, dtype=a.data.dtype), "sum")

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), a.shape).astype(a.data.dtype, copy=True),)
        g2 = g
        if not keepdims:
            g2 = np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    record("sum", (a,), (out,), bwd)
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def softmax(a: Tensor, axis: int) -> Tensor:
    """Softmax with max-subtraction; values in (0, 1], unit sum along axis."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _wrap(y.astype(x.dtype, copy=False), "softmax")

    def bwd(g):
        dot = (g * out.data).sum(axis=axis, keepdims=True)
        return (out.data * (g - dot),)

    record("softmax", (a,), (out,), bwd)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = _wrap(a.data.reshape(shape), "reshape")
    record("reshape", (a,), (out,), lambda g: (g.reshape(a.shape),))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.dtype != b.dtype:
        raise TensorError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    out = _wrap(a.data @ b.data, "matmul")

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    record("matmul", (a, b), (out,), bwd)
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    dtype = tensors[0].dtype
    for t in tensors:
        if t.dtype != dtype:
            raise TensorError("concat dtype mismatch")
    out = _wrap(np.concatenate([t.data for t in tensors], axis=axis), "concat")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    record("concat", tuple(tensors), (out,), bwd)
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = _wrap(a.data[idx].copy(), "narrow")

    def bwd(g):
        full_g = np.zeros(a.shape, dtype=a.data.dtype)
        full_g[idx] = g
        return (full_g,)

    record("narrow", (a,), (out,), bwd)
    return out


def where_mask(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where a constant boolean mask holds, else ``b``.

    The mask is data, not a differentiable input; gradients route to the
    selected branch only.
    """
    a, b = _binary_operands(a, b)
    m = np.broadcast_to(mask, np.broadcast_shapes(a.shape, b.shape))
    out = _wrap(np.where(m, a.data, b.data), "where_mask")

    def bwd(g):
        return (_unbroadcast(np.where(m, g, 0.0), a.shape),
                _unbroadcast(np.where(m, 0.0, g), b.shape))

    record("where_mask", (a, b), (out,), bwd)
    return out


# ---------------------------------------------------------------------------
# spatial padding / cropping on NCHW tensors


def pad2d_zero(a: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    if a.ndim != 4:
        raise ShapeError("pad2d_zero expects NCHW")
    widths = ((0, 0), (0, 0), (top, bottom), (left, right))
    out = _wrap(np.pad(a.data, widths), "pad2d_zero")
    h, w = a.shape[2], a.shape[3]

    def bwd(g):
        return (np.ascontiguousarray(g[:, :, top:top + h, left:left + w]),)

    record("pad2d_zero", (a,), (out,), bwd)
    return out


def pad2d_reflect(a: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Reflection padding (edge not repeated). Backward folds mirrored
    contributions back onto their interior sources."""
    if a.ndim != 4:
        raise ShapeError("pad2d_reflect expects NCHW")
    h, w = a.shape[2], a.shape[3]
    if top >= h or bottom >= h or left >= w or right >= w:
        raise ShapeError("reflection padding wider than input")
    ys = _reflect_index(h, top, bottom)
    xs = _reflect_index(w, left, right)
    out = _wrap(np.ascontiguousarray(a.data[:, :, ys][:, :, :, xs]), "pad2d_reflect")

    def bwd(g):
        gh = np.zeros((g.shape[0], g.shape[1], h, g.shape[3]), dtype=g.dtype)
        np.add.at(gh, (slice(None), slice(None), ys), g)
        gx = np.zeros((g.shape[0], g.shape[1], h, w), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), slice(None), xs), gh)
        return (gx,)

    record("pad2d_reflect", (a,), (out,), bwd)
    return out


def _reflect_index(n: int, before: int, after: int) -> np.ndarray:
    base = np.arange(-before, n + after)
    period = 2 * n - 2 if n > 1 else 1
    m = np.mod(base, period)
    return np.where(m >= n, period - m, m)


def crop2d(a: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    if a.ndim != 4:
        raise ShapeError("crop2d expects NCHW")
    out = _wrap(np.ascontiguousarray(
        a.data[:, :, top:top + height, left:left + width]), "crop2d")

    def bwd(g):
        full_g = np.zeros(a.shape, dtype=g.dtype)
        full_g[:, :, top:top + height, left:left + width] = g
        return (full_g,)

    record("crop2d", (a,), (out,), bwd)
    return out
