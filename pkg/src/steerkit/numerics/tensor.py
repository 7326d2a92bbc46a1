"""Dense float64 tensors with a reverse-mode tape.

A :class:`Tape` is built fresh for every forward evaluation. Primitive ops are
methods on the tape; each appends one node holding its inputs and a closure
that maps the output cotangent to input cotangents. :func:`backward` walks the
nodes in reverse.

    tape = Tape()
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    y = tape.sum(x * x)
    grads = backward(tape, 1.0)
    grads[x]  # array([2., 4., 6.])
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    """A float64 array plus autograd bookkeeping.

    Tensors hash by identity so they can key gradient maps. ``tape`` is set on
    op outputs; leaves are tape-free and may be reused across tapes.
    """

    __slots__ = ("data", "requires_grad", "tape", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __hash__ = object.__hash__

    def _tape_with(self, other) -> "Tape":
        tape = self.tape or getattr(other, "tape", None)
        if tape is None:
            raise RuntimeError("arithmetic on tensors needs at least one tape-bound operand")
        return tape

    def __add__(self, other):
        return self._tape_with(other).add(self, other)

    def __radd__(self, other):
        return self._tape_with(other).add(other, self)

    def __sub__(self, other):
        return self._tape_with(other).sub(self, other)

    def __rsub__(self, other):
        return self._tape_with(other).sub(other, self)

    def __mul__(self, other):
        return self._tape_with(other).mul(self, other)

    def __rmul__(self, other):
        return self._tape_with(other).mul(other, self)

    def __truediv__(self, other):
        return self._tape_with(other).div(self, other)

    def __neg__(self):
        return self._tape_with(None).neg(self)

    def __matmul__(self, other):
        return self._tape_with(other).matmul(self, other)

    def __getitem__(self, idx):
        return self._tape_with(None).index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Node:
    __slots__ = ("out", "inputs", "vjp", "op")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable, op: str):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.op = op


class Tape:
    """Append-only op record. Single use, single thread."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _record(self, value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
        out = Tensor(value, requires_grad=any(t.requires_grad for t in inputs))
        out.tape = self
        self.nodes.append(Node(out, tuple(inputs), vjp, op))
        return out

    # elementwise binary, numpy broadcasting

    def add(self, a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        sa, sb = a.shape, b.shape
        return self._record(
            a.data + b.data, (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")

    def sub(self, a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        sa, sb = a.shape, b.shape
        return self._record(
            a.data - b.data, (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")

    def mul(self, a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        ad, bd = a.data, b.data
        return self._record(
            ad * bd, (a, b),
            lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")

    def div(self, a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        ad, bd = a.data, b.data
        return self._record(
            ad / bd, (a, b),
            lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
            "div")

    def neg(self, a) -> Tensor:
        a = as_tensor(a)
        return self._record(-a.data, (a,), lambda g: (-g,), "neg")

    def scale(self, a, c: float) -> Tensor:
        a = as_tensor(a)
        return self._record(a.data * c, (a,), lambda g: (g * c,), "scale")

    def matmul(self, a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        if a.shape[-1] != b.shape[0] or b.data.ndim != 2:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}: inner dimensions {a.shape[-1]} != {b.shape[0]}")
        ad, bd = a.data, b.data

        def vjp(g):
            if ad.ndim == 1:
                return g @ bd.T, np.outer(ad, g)
            return g @ bd.T, ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])

        return self._record(ad @ bd, (a, b), vjp, "matmul")

    # elementwise unary

    def tanh(self, a) -> Tensor:
        a = as_tensor(a)
        y = np.tanh(a.data)
        return self._record(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")

    def exp(self, a) -> Tensor:
        a = as_tensor(a)
        y = np.exp(a.data)
        return self._record(y, (a,), lambda g: (g * y,), "exp")

    def log(self, a) -> Tensor:
        a = as_tensor(a)
        x = a.data
        return self._record(np.log(x), (a,), lambda g: (g / x,), "log")

    def square(self, a) -> Tensor:
        a = as_tensor(a)
        x = a.data
        return self._record(x * x, (a,), lambda g: (2.0 * g * x,), "square")

    def sqrt(self, a) -> Tensor:
        a = as_tensor(a)
        y = np.sqrt(a.data)
        return self._record(y, (a,), lambda g: (g * 0.5 / y,), "sqrt")

    # reductions and shape

    def norm(self, a, axis: int = -1) -> Tensor:
        """Euclidean norm along ``axis``; the subgradient at 0 is taken as 0."""
        a = as_tensor(a)
        x = a.data
        y = np.sqrt(np.sum(x * x, axis=axis))
        safe = np.expand_dims(np.where(y > 0.0, y, 1.0), axis)
        return self._record(y, (a,), lambda g: (np.expand_dims(g, axis) * x / safe,), "norm")

    def sum(self, a, axis=None, keepdims: bool = False) -> Tensor:
        a = as_tensor(a)
        shape = a.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return self._record(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")

    def mean(self, a, axis=None) -> Tensor:
        a = as_tensor(a)
        n = a.size if axis is None else a.shape[axis]
        return self.scale(self.sum(a, axis=axis), 1.0 / n)

    def logsumexp(self, a, axis: int = -1) -> Tensor:
        """Stable log-sum-exp along ``axis`` (max-subtraction form)."""
        a = as_tensor(a)
        x = a.data
        if x.shape[axis] == 0:
            raise ShapeError("logsumexp over an empty axis")
        m = np.max(x, axis=axis, keepdims=True)
        w = np.exp(x - m)
        s = w.sum(axis=axis, keepdims=True)
        y = np.squeeze(m + np.log(s), axis=axis)
        soft = w / s
        return self._record(y, (a,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp")

    def log_softmax(self, a, axis: int = -1) -> Tensor:
        a = as_tensor(a)
        x = a.data
        m = np.max(x, axis=axis, keepdims=True)
        z = x - m
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        y = z - lse
        p = np.exp(y)
        return self._record(
            y, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")

    def reshape(self, a, shape) -> Tensor:
        a = as_tensor(a)
        old = a.shape
        return self._record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")

    def concat(self, tensors: Sequence, axis: int = -1) -> Tensor:
        ts = [as_tensor(t) for t in tensors]
        ax = axis % ts[0].data.ndim
        bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
        return self._record(
            np.concatenate([t.data for t in ts], axis=ax), ts,
            lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")

    def index(self, a, idx) -> Tensor:
        a = as_tensor(a)
        shape = a.shape

        def vjp(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return self._record(a.data[idx], (a,), vjp, "index")


def backward(tape: Tape, output_seed, output: Tensor | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from ``output`` (default: the last node).

    Returns a gradient for every differentiable leaf feeding the tape;
    leaves the output does not depend on get zeros.
    """
    grads: dict[Tensor, np.ndarray] = {}
    if not tape.nodes:
        return grads
    if output is None:
        output = tape.nodes[-1].out
    seed = np.asarray(output_seed, dtype=np.float64)
    if seed.shape != output.shape:
        if seed.ndim == 0 and output.data.ndim == 0:
            pass
        else:
            raise ShapeError(f"seed shape {seed.shape} does not match output shape {output.shape}")
    cot: dict[int, np.ndarray] = {id(output): seed}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        for t in node.inputs:
            if t.requires_grad and t.tape is None:
                leaves[id(t)] = t
        g = cot.pop(id(node.out), None)
        if g is None or not node.out.requires_grad:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if not t.requires_grad:
                continue
            k = id(t)
            prev = cot.get(k)
            cot[k] = gi if prev is None else prev + gi
    for k, t in leaves.items():
        g = cot.get(k)
        grads[t] = np.zeros(t.shape) if g is None else np.asarray(g).reshape(t.shape)
    return grads


def logsumexp(values) -> float:
    """Stable scalar log-sum-exp of a non-empty sequence."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("logsumexp of an empty sequence")
    m = float(np.max(x))
    if x.size == 1:
        return float(x[0])
    return m + float(np.log(np.sum(np.exp(x - m))))
