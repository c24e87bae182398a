"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tape` is opened per batch as a context manager.  Every op whose
inputs require gradients appends a node to the active tape; ``tape.backward``
then walks the nodes in reverse creation order, each exactly once.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> tape.backward(loss, [w])[0]
    array([2., 4.])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_ACTIVE: list["Tape"] = []


class Tensor:
    """Immutable n-d array of float64 values, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr is data:
            arr = arr.copy()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # takes ownership of a freshly computed array, no copy
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str = ""


@dataclass
class Tape:
    """Ordered record of differentiable ops for one forward pass."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def backward(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

        Tensors that the loss does not depend on get zero gradients.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for t in wrt:
            g = grads.get(id(t))
            out.append(np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64))
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    track = bool(_ACTIVE) and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(np.asarray(data, dtype=np.float64), requires_grad=track)
    if track:
        _ACTIVE[-1].nodes.append(Node(out, inputs, backward, op))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _record(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    """``a ** exponent`` for a constant exponent; zero bases get zero gradient."""
    a = _as_tensor(a)
    exponent = float(exponent)
    out = a.data**exponent

    def backward(g):
        nz = a.data != 0.0
        safe = np.where(nz, a.data, 1.0)
        at_zero = 1.0 if exponent == 1.0 else 0.0
        return (g * np.where(nz, exponent * safe ** (exponent - 1.0), at_zero),)

    return _record(out, (a,), backward, "pow")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore"):
            d = np.where(out > 0.0, 0.5 / np.where(out > 0.0, out, 1.0), 0.0)
        return (g * d,)

    return _record(out, (a,), backward, "sqrt")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0
    return _record(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); the gradient is blocked where the floor is active."""
    a = _as_tensor(a)
    keep = a.data >= floor
    return _record(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,), "clamp_min")


# ------------------------------------------------------------------ reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) / float(count)


# ------------------------------------------------------------------ structural


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shapes {a.shape} @ {b.shape}")
    return _record(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return _record(a.data.T, (a,), lambda g: (g.T,), "transpose")


def pick(a, index) -> Tensor:
    """Row-wise gather ``a[i, index[i]]`` from a 2-d tensor."""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return _record(out, (a,), backward, "pick")


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), backward, "softmax")


# -------------------------------------------------------------- conv / pooling
# Spatial ops work channels-last: (B, H, W, C).


def permute(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "permute")


def conv2d(x, weight, bias) -> Tensor:
    """'Same' convolution, stride 1, zero padding k//2, on channels-last input.

    x: (B, H, W, C); weight: (O, C, kh, kw); bias: (O,). Returns (B, H, W, O).
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    bsz, h, w, c = x.shape
    o, c2, kh, kw = weight.shape
    if c != c2:
        raise ValueError(f"conv2d expects {c2} input channels, got {c}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    cols = np.concatenate([xp[:, i : i + h, j : j + w, :] for i, j in offsets], axis=-1)
    cols = cols.reshape(bsz * h * w, kh * kw * c)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    out = (cols @ wmat.T + bias.data).reshape(bsz, h, w, o)

    def backward(g):
        gm = g.reshape(-1, o)
        gw = (gm.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        gb = gm.sum(axis=0)
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(bsz, h, w, kh * kw, c)
            gxp = np.zeros(xp.shape)
            for k, (i, j) in enumerate(offsets):
                gxp[:, i : i + h, j : j + w, :] += dcols[:, :, :, k, :]
            gx = gxp[:, ph : ph + h, pw : pw + w, :]
        return gx, gw, gb

    return _record(out, (x, weight, bias), backward, "conv2d")


def maxpool2(x) -> Tensor:
    """2x2 max pooling, stride 2, on channels-last (B, H, W, C).

    Ties route the gradient to the first window element in row-major order.
    """
    x = _as_tensor(x)
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(b, h // 2, 2, w // 2, 2, c)
    quads = [win[:, :, i, :, j, :] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def backward(g):
        gx = np.zeros(win.shape)
        taken = np.zeros(out.shape, dtype=bool)
        for q, (i, j) in zip(quads, [(0, 0), (0, 1), (1, 0), (1, 1)]):
            hit = (q == out) & ~taken
            gx[:, :, i, :, j, :] = np.where(hit, g, 0.0)
            taken |= hit
        return (gx.reshape(b, h, w, c),)

    return _record(out, (x,), backward, "maxpool2")
