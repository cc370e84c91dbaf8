"""Dense matrix helpers and a small reverse-mode tape.

Matrices are 2-D ``float64`` NumPy arrays. The tape is only used to
differentiate the embedding predictor; the GCN carries its own hand-written
backward pass in :mod:`satgnn.gnn`.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def check_finite(m: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return m


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul")


def frobenius(a) -> float:
    a = as_matrix(a)
    return float(np.sqrt(np.sum(a * a)))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum an adjoint back down to ``shape`` after NumPy broadcasting."""
    if g.shape == shape:
        return g
    out = g
    while out.ndim > len(shape):
        out = out.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and out.shape[axis] != 1:
            out = out.sum(axis=axis, keepdims=True)
    return out


class Var:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "value", "index", "parents", "backward", "name")

    def __init__(self, tape: "Tape", value: np.ndarray, parents=(), backward=None, name=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.backward = backward
        self.name = name
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return mm(self, other)

    def __rmatmul__(self, other):
        return mm(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, rows):
        return take_rows(self, rows)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Var{label} #{self.index} shape={self.shape}>"


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as they are created, so list order is a valid
    topological order and :meth:`grad` simply walks it backwards.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: list[Var] = []

    def leaf(self, value, name: str | None = None) -> Var:
        v = Var(self, np.array(value, dtype=np.float64), name=name)
        self.leaves.append(v)
        return v

    def const(self, value) -> Var:
        return Var(self, np.asarray(value, dtype=np.float64))

    def grad(self, root: Var, wrt: Sequence[Var] | None = None) -> dict[Var, np.ndarray]:
        if root.tape is not self:
            raise ValueError("root was recorded on a different tape")
        if root.value.size != 1:
            raise ShapeError(f"grad needs a scalar root, got shape {root.shape}")
        adj: dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
        for node in reversed(self.nodes[: root.index + 1]):
            g = adj.get(node.index)
            if g is None or node.backward is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                prev = adj.get(parent.index)
                adj[parent.index] = pg if prev is None else prev + pg
        leaves = self.leaves if wrt is None else wrt
        return {v: adj.get(v.index, np.zeros_like(v.value)) for v in leaves}


def _lift(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _op(tape, value, parents, backward) -> Var:
    return Var(tape, value, tuple(parents), backward)


def mm(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    av, bv = a.value, b.value
    return _op(tape, av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.shape, b.shape
    return _op(tape, a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.shape, b.shape
    return _op(tape, a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def hadamard(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return _op(tape, av * bv, (a, b),
               lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Var, c: float) -> Var:
    return _op(a.tape, a.value * c, (a,), lambda g: (g * c,))


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    return _op(a.tape, y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Var) -> Var:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _op(a.tape, y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return _op(a.tape, np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sqrt(a: Var) -> Var:
    y = np.sqrt(a.value)
    # subgradient 0 at the origin keeps norm losses usable at an exact fit
    inv = np.divide(0.5, y, out=np.zeros_like(y), where=y > 0)
    return _op(a.tape, y, (a,), lambda g: (g * inv,))


def take_rows(a: Var, rows) -> Var:
    rows = np.asarray(rows, dtype=np.int64)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, rows, g)
        return (out,)

    return _op(a.tape, a.value[rows], (a,), back)


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    tape = _tape_of(*parts)
    parts = [_lift(tape, p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _op(tape, np.concatenate([p.value for p in parts], axis=axis), parts,
               lambda g: tuple(np.split(g, sizes, axis=axis)))


def reduce_sum(a: Var) -> Var:
    shape = a.shape
    return _op(a.tape, np.array([[a.value.sum()]]), (a,),
               lambda g: (np.full(shape, g.item()),))


def linear_map(a: Var, forward: Callable, adjoint: Callable) -> Var:
    """Apply a constant linear operator (e.g. a sparse propagation matrix).

    ``forward(x)`` computes ``Ax`` and ``adjoint(g)`` computes ``A^T g``.
    """
    return _op(a.tape, forward(a.value), (a,), lambda g: (adjoint(g),))


def frobenius_norm(a: Var) -> Var:
    return sqrt(reduce_sum(hadamard(a, a)))
