"""Minimal reverse-mode autodiff over numpy arrays.

Exactly the operations the forecasting model needs: batched matmul, a small
family of elementwise ops, row softmax, reductions, and the shape plumbing
(reshape / transpose / concat / slice / broadcast / row gather). Gradients are
recorded on an explicit :class:`Tape` and replayed in reverse creation order.

Precision is whatever dtype the arrays carry; training uses float32 by
default, gradient checking requires float64.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_ACTIVE_TAPE: Optional["Tape"] = None


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Used as a context manager; ops executed inside the ``with`` block are
    recorded when any input requires gradients. A tape is consumed by
    :func:`backward` and cannot be replayed: a second backward raises
    :class:`ContractError` (prevents silent gradient double-accumulation).
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False
        self._next_id = 0
        self._leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def _register(self, t: "Tensor") -> int:
        nid = self._next_id
        self._next_id += 1
        t.node_id = nid
        t.tape = self
        return nid

    def _add(self, op: str, inputs: tuple["Tensor", ...], out: "Tensor",
             backward: Callable) -> None:
        need = []
        in_ids = []
        for inp in inputs:
            if inp.tape is not self:
                self._register(inp)
                self._leaves[inp.node_id] = inp
            in_ids.append(inp.node_id)
            need.append(inp.requires_grad)
        out_id = self._register(out)
        self._produced.add(out_id)
        self.records.append(_Record(op, tuple(in_ids), out_id, tuple(need), backward))


class _Record:
    __slots__ = ("op", "in_ids", "out_id", "need", "backward")

    def __init__(self, op, in_ids, out_id, need, backward):
        self.op = op
        self.in_ids = in_ids
        self.out_id = out_id
        self.need = need
        self.backward = backward


class Tensor:
    """A shape-carrying float array that can participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple[int, ...]:
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

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.item())

    def backward(self) -> None:
        backward(self)

    # -- operator sugar --------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def sin(self):
        return sin(self)

    def abs(self):
        return abs_(self)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap non-Tensor operands, matching the dtype of the Tensor one."""
    if isinstance(a, Tensor):
        return a, _as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return _as_tensor(a, like=b), b
    return _as_tensor(a), _as_tensor(b)


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
          backward_fn: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE
    if tape is not None and not tape.consumed and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._add(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcastable(sa: tuple[int, ...], sb: tuple[int, ...]) -> bool:
    if sa == sb or not sa or not sb:
        return True
    try:
        np.broadcast_shapes(sa, sb)
        return True
    except ValueError:
        return False


# -- matmul ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product; leading dims broadcast per numpy rules."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or not _broadcastable(a.shape[:-2], b.shape[:-2]):
        raise DimensionError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    # Dense-layer case (2-D rhs): flatten the stacked lhs so the whole
    # product runs as one GEMM instead of a slow per-slice loop.
    if bd.ndim == 2 and ad.ndim > 2:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        out = ad @ bd

    def backward_fn(g, need):
        ga = gb = None
        if need[0]:
            if bd.ndim == 2 and g.ndim > 2:
                ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(a.shape)
            else:
                ga = _unbroadcast(g @ bd.swapaxes(-1, -2), a.shape)
        if need[1]:
            if bd.ndim == 2:
                # The flat GEMM also folds the broadcast reduction over
                # leading axes into the product itself.
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", (a, b), out, backward_fn)


# -- elementwise binaries ---------------------------------------------------

def _binary(op: str, a, b, fwd, bwd) -> Tensor:
    a, b = _pair(a, b)
    if not _broadcastable(a.shape, b.shape):
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")
    out = fwd(a.data, b.data)

    def backward_fn(g, need):
        ga, gb = bwd(g, a.data, b.data)
        ga = _unbroadcast(ga, a.shape) if need[0] else None
        gb = _unbroadcast(gb, b.shape) if need[1] else None
        return ga, gb

    return _emit(op, (a, b), out, backward_fn)


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y: (g, g))


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: (g, -g))


def mul(a, b) -> Tensor:
    """Hadamard product with broadcasting."""
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, x, y: (g * y, g * x))


# -- elementwise unaries ----------------------------------------------------

def _unary(op: str, a, fwd, bwd) -> Tensor:
    a = _as_tensor(a)
    out = fwd(a.data)

    def backward_fn(g, need):
        return (bwd(g, a.data, out) if need[0] else None,)

    return _emit(op, (a,), out, backward_fn)


def relu(a) -> Tensor:
    # subgradient at 0 is 0
    return _unary("relu", a, lambda x: np.maximum(x, 0),
                  lambda g, x, y: g * (x > 0))


def sigmoid(a) -> Tensor:
    def fwd(x):
        # exp of a non-positive argument cannot overflow; both branches
        # read the same decaying exponential.
        t = np.exp(-np.abs(x))
        return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))

    return _unary("sigmoid", a, fwd, lambda g, x, y: g * y * (1.0 - y))


def tanh(a) -> Tensor:
    return _unary("tanh", a, np.tanh, lambda g, x, y: g * (1.0 - y * y))


def sin(a) -> Tensor:
    return _unary("sin", a, np.sin, lambda g, x, y: g * np.cos(x))


def abs_(a) -> Tensor:
    # derivative at 0 defined as 0 (np.sign(0) == 0)
    return _unary("abs", a, np.abs, lambda g, x, y: g * np.sign(x))


# -- softmax ----------------------------------------------------------------

def softmax_rows(a) -> Tensor:
    """Softmax over the last axis, max-subtracted for overflow stability.

    NaN inputs propagate to NaN outputs.
    """
    a = _as_tensor(a)
    if a.ndim < 1 or a.shape[-1] < 1:
        raise DimensionError(f"softmax_rows needs a non-empty last axis, got {a.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    out = ez / ez.sum(axis=-1, keepdims=True)

    def backward_fn(g, need):
        if not need[0]:
            return (None,)
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _emit("softmax_rows", (a,), out, backward_fn)


# -- reductions ---------------------------------------------------------------

def _normalize_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        norm.append(ax % ndim)
    return tuple(norm)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward_fn(g, need):
        if not need[0]:
            return (None,)
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", (a,), out, backward_fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward_fn(g, need):
        if not need[0]:
            return (None,)
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _emit("mean", (a,), out, backward_fn)


# -- shape plumbing -----------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    if math.prod(shape) != a.size and -1 not in shape:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    out = a.data.reshape(shape)

    def backward_fn(g, need):
        return (g.reshape(a.shape) if need[0] else None,)

    return _emit("reshape", (a,), out, backward_fn)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose axes {axes} invalid for rank {a.ndim}")
    out = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def backward_fn(g, need):
        return (g.transpose(inv) if need[0] else None,)

    return _emit("transpose", (a,), out, backward_fn)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    if not _broadcastable(a.shape, shape) or np.broadcast_shapes(a.shape, shape) != shape:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}")
    out = np.broadcast_to(a.data, shape)

    def backward_fn(g, need):
        return (_unbroadcast(g, a.shape) if need[0] else None,)

    return _emit("broadcast_to", (a,), out, backward_fn)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    if not parts:
        raise DimensionError("concat needs at least one input")
    ndim = parts[0].ndim
    axis = axis % ndim
    ref = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if p.ndim != ndim or other[:axis] + other[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise DimensionError(
                f"concat shapes disagree off axis {axis}: {[p.shape for p in parts]}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g, need):
        pieces = np.split(g, splits, axis=axis)
        return tuple(piece if n else None for piece, n in zip(pieces, need))

    return _emit("concat", parts, out, backward_fn)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    axis = axis % a.ndim
    idx = tuple(slice(start, stop) if i == axis else slice(None) for i in range(a.ndim))
    out = a.data[idx].copy()

    def backward_fn(g, need):
        if not need[0]:
            return (None,)
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _emit("slice", (a,), out, backward_fn)


def gather_rows(a, indices) -> Tensor:
    """Select rows of ``a`` along axis 0; repeated indices accumulate grads."""
    a = _as_tensor(a)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"gather indices outside [0, {a.shape[0]})")
    out = a.data[idx]

    def backward_fn(g, need):
        if not need[0]:
            return (None,)
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("gather_rows", (a,), out, backward_fn)


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    """Stack equal-shape tensors along a new axis (reshape + concat)."""
    parts = [_as_tensor(p) for p in parts]
    expanded = [reshape(p, p.shape[:axis] + (1,) + p.shape[axis:]) for p in parts]
    return concat(expanded, axis=axis)


# -- backward ---------------------------------------------------------------

def backward(root: Tensor) -> None:
    """Propagate gradients from a scalar root back to every reachable leaf.

    Consumes the tape: a second call on the same tape raises ContractError.
    Gradients accumulate additively across fan-out, and into pre-existing
    ``.grad`` arrays on leaves.
    """
    tape = root.tape
    if tape is None:
        raise ContractError("backward root was not produced on a tape")
    if tape.consumed:
        raise ContractError("tape already consumed by a previous backward")
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.out_id, None)
        if g is None:
            continue
        for in_id, gi in zip(rec.in_ids, rec.backward(g, rec.need)):
            if gi is None:
                continue
            held = grads.get(in_id)
            grads[in_id] = gi if held is None else held + gi

    for nid, leaf in tape._leaves.items():
        if not leaf.requires_grad or nid not in grads:
            continue
        g = grads[nid]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
