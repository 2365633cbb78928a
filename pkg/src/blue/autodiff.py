"""Reverse-mode autodiff over numpy arrays.

A Tensor wraps one dense array. Every operation builds the output eagerly
and, when any input participates in a gradient, records a closure that routes
the output gradient back to those inputs. backward() on a scalar walks the
graph once in reverse topological order.

The op set is deliberately small: exactly what a transformer-style model
needs, each with a hand-written vector-Jacobian product that finite
differences can check. Blocked positions in masked_softmax carry an additive
-inf and produce probability exactly 0 with gradient exactly 0, which is what
makes padding invisible to the rest of the stack.
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int]


class Tensor:
    """Dense array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite (no NaN or inf)")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, s):
        if isinstance(s, Tensor):
            raise TypeError("tensor/tensor division is not supported; divide by a constant")
        return scale(self, 1.0 / float(s))

    # -- backward pass ------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable node."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        for node in topo:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)


def _as_tensor(x: ArrayLike, like: Tensor) -> Tensor:
    """Wrap constants, matching the dtype of the tensor they combine with."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape an operand had before broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra ops
# ---------------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    bt = _as_tensor(b, a)
    try:
        data = a.data + bt.data
    except ValueError:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {bt.data.shape}")

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(bt, _unbroadcast(g, bt.data.shape))

    return _result(data, (a, bt), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    anchor = a if isinstance(a, Tensor) else b
    at = _as_tensor(a, anchor)
    bt = _as_tensor(b, anchor)
    try:
        data = at.data - bt.data
    except ValueError:
        raise ValueError(f"sub shape mismatch: {at.data.shape} vs {bt.data.shape}")

    def backward(g):
        _accum(at, _unbroadcast(g, at.data.shape))
        _accum(bt, -_unbroadcast(g, bt.data.shape))

    return _result(data, (at, bt), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    bt = _as_tensor(b, a)
    try:
        data = a.data * bt.data
    except ValueError:
        raise ValueError(f"mul shape mismatch: {a.data.shape} vs {bt.data.shape}")

    def backward(g):
        _accum(a, _unbroadcast(g * bt.data, a.data.shape))
        _accum(bt, _unbroadcast(g * a.data, bt.data.shape))

    return _result(data, (a, bt), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _result(-a.data, (a,), backward)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    s = float(s)

    def backward(g):
        _accum(a, g * s)

    return _result(a.data * np.asarray(s, dtype=a.dtype), (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; the last two axes multiply, the rest broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(
            f"matmul needs >= 2-d operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _result(data, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along one axis (defaults to the feature axis)."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accum(t, piece)

    return _result(data, tensors, backward)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0

    def backward(g):
        _accum(a, g * keep)

    return _result(a.data * keep, (a,), backward)


def sin(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g * np.cos(a.data))

    return _result(np.sin(a.data), (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _result(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g / a.data)

    return _result(np.log(a.data), (a,), backward)


# ---------------------------------------------------------------------------
# Normalization, masking, regularization
# ---------------------------------------------------------------------------


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine part)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        _accum(a, (g - gm - y * gym) * inv)

    return _result(y, (a,), backward)


def masked_softmax(a: Tensor, additive_mask: np.ndarray) -> Tensor:
    """Softmax over the last axis with an additive mask.

    Blocked entries of the mask hold -inf and come out with probability
    exactly 0 and gradient exactly 0. A fully blocked row yields all zeros.
    """
    additive_mask = np.asarray(additive_mask, dtype=a.dtype)
    z = a.data + additive_mask
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    s = e.sum(axis=-1, keepdims=True)
    y = e / np.where(s == 0.0, 1.0, s)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, y * (g - dot))

    return _result(y, (a,), backward)


def dropout(a: Tensor, p: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; exact identity when train is off or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.data.shape) >= p).astype(a.dtype) / np.asarray(
        1.0 - p, dtype=a.dtype
    )
    return mul(a, keep)


# ---------------------------------------------------------------------------
# Shape plumbing
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: tuple) -> Tensor:
    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _result(a.data.reshape(shape), (a,), backward)


def swap_axes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def backward(g):
        _accum(a, np.swapaxes(g, ax1, ax2))

    return _result(np.swapaxes(a.data, ax1, ax2), (a,), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along one axis."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            a.grad += full

    return _result(a.data[idx], (a,), backward)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of a 2-d tensor; output shape = index.shape + (row_dim,)."""
    if a.data.ndim != 2:
        raise ValueError(f"gather_rows needs a 2-d tensor, got shape {a.data.shape}")
    index = np.asarray(index)
    data = a.data[index]

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, index.reshape(-1), g.reshape(-1, a.data.shape[1]))
            a.grad += acc

    return _result(data, (a,), backward)


def take_per_row(a: Tensor, index: np.ndarray) -> Tensor:
    """out[i] = a[i, index[i]] for a 2-d tensor."""
    if a.data.ndim != 2:
        raise ValueError(f"take_per_row needs a 2-d tensor, got shape {a.data.shape}")
    index = np.asarray(index)
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, index]

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            acc[rows, index] = g
            a.grad += acc

    return _result(data, (a,), backward)


# ---------------------------------------------------------------------------
# Reductions and losses
# ---------------------------------------------------------------------------


def _ensure_axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(sorted(a % ndim for a in axis))


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _ensure_axis_tuple(axis, a.data.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _result(data, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _ensure_axis_tuple(axis, a.data.ndim)
    count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return scale(tensor_sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reduce_max(a: Tensor, axis: int) -> Tensor:
    """Max over one axis; the gradient routes to the first argmax position."""
    axis = axis % a.data.ndim
    data = a.data.max(axis=axis)
    arg = np.expand_dims(a.data.argmax(axis=axis), axis)

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.put_along_axis(acc, arg, np.expand_dims(g, axis), axis=axis)
            a.grad += acc

    return _result(data, (a,), backward)


def reduce_min(a: Tensor, axis: int) -> Tensor:
    """Min over one axis; the gradient routes to the first argmin position."""
    axis = axis % a.data.ndim
    data = a.data.min(axis=axis)
    arg = np.expand_dims(a.data.argmin(axis=axis), axis)

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.put_along_axis(acc, arg, np.expand_dims(g, axis), axis=axis)
            a.grad += acc

    return _result(data, (a,), backward)


def squared_error(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise (a - b)**2."""
    d = sub(a, b)
    return mul(d, d)


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (n, classes) logits against int labels."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ValueError(f"expected (n, classes) logits, got shape {logits.data.shape}")
    if labels.shape != (logits.data.shape[0],):
        raise ValueError(
            f"labels shape {labels.shape} does not match logits {logits.data.shape}"
        )
    # stable log-sum-exp: the shift is a constant, so the gradient is unaffected
    shift = logits.data.max(axis=-1, keepdims=True)
    lse = add(log(tensor_sum(exp(sub(logits, shift)), axis=-1)), shift[:, 0])
    return mean(sub(lse, take_per_row(logits, labels)))


__all__ = [
    "Tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "concat",
    "relu",
    "sin",
    "exp",
    "log",
    "layer_norm",
    "masked_softmax",
    "dropout",
    "reshape",
    "swap_axes",
    "slice_axis",
    "gather_rows",
    "take_per_row",
    "tensor_sum",
    "mean",
    "reduce_max",
    "reduce_min",
    "squared_error",
    "cross_entropy_logits",
]
