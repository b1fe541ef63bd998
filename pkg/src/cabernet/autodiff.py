"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records every operation of a forward pass in creation order
(define-by-run), so the record itself is a topological order of the
computation graph. ``Tape.gradients`` walks it once in reverse and
accumulates a gradient for every requested node; values reused k times
receive exactly k summed contributions.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class AutodiffError(Exception):
    """Base class for tape/operation failures."""


class ShapeMismatchError(AutodiffError):
    def __init__(self, op: str, shape_a, shape_b):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{op}: incompatible shapes {self.shape_a} and {self.shape_b}")


class DomainError(AutodiffError):
    def __init__(self, op: str, detail: str):
        self.op = op
        super().__init__(f"{op}: {detail}")


def _as_array(value) -> Array:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """One node on a tape: a float64 value plus links to its parents."""

    __slots__ = ("tape", "node_id", "data", "parents", "backward_rule")

    def __init__(self, tape: "Tape", data: Array, parents: tuple["Tensor", ...],
                 backward_rule: Callable[[Array], tuple[Array, ...]] | None):
        self.tape = tape
        self.data = data
        self.parents = parents
        self.backward_rule = backward_rule
        self.node_id = tape._append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return self.tape.constant(other)

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __neg__(self):
        return self.tape.op("neg", -self.data, (self,), lambda g: (-g,))

    def __getitem__(self, key):
        value = self.data[key]
        shape = self.data.shape

        def backward(g: Array) -> tuple[Array, ...]:
            out = np.zeros(shape)
            np.add.at(out, key, g)
            return (out,)

        return self.tape.op("slice", np.array(value, dtype=np.float64), (self,), backward)

    # -- reductions / shape ----------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, id={self.node_id})"


class Tape:
    """Ordered record of one forward pass.

    Creation order is topological by construction: an op can only consume
    tensors that already exist, so every parent precedes its consumers.
    """

    def __init__(self):
        self._nodes: list[Tensor] = []
        self.roots: list[int] = []

    def _append(self, node: Tensor) -> int:
        self._nodes.append(node)
        return len(self._nodes) - 1

    def leaf(self, data) -> Tensor:
        """Register a parameter (root) node."""
        t = Tensor(self, _as_array(data), (), None)
        self.roots.append(t.node_id)
        return t

    def constant(self, data) -> Tensor:
        """Register a non-parameter input node."""
        return Tensor(self, _as_array(data), (), None)

    def op(self, name: str, value: Array, parents: tuple[Tensor, ...],
           backward_rule: Callable[[Array], tuple[Array, ...]]) -> Tensor:
        """Record an operation result; ``backward_rule`` maps the output
        gradient to one gradient per parent. Custom composite ops (for
        example a fused recurrent cell) plug in through here."""
        for p in parents:
            if p.tape is not self:
                raise AutodiffError(f"{name}: parent tensor belongs to a different tape")
        return Tensor(self, value, parents, backward_rule)

    def backward(self, loss: Tensor) -> dict[int, Array]:
        """Backpropagate from a scalar ``loss``; returns a map from root
        (parameter) node id to its gradient. Unused roots get zeros."""
        grads = self._backward_all(loss)
        out = {}
        for rid in self.roots:
            g = grads[rid]
            out[rid] = np.zeros_like(self._nodes[rid].data) if g is None else g
        return out

    def gradients(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[Array]:
        """Gradients of scalar ``loss`` w.r.t. arbitrary tape nodes."""
        grads = self._backward_all(loss)
        return [grads[t.node_id] if grads[t.node_id] is not None
                else np.zeros_like(t.data) for t in wrt]

    def _backward_all(self, loss: Tensor) -> list[Array | None]:
        if loss.tape is not self:
            raise AutodiffError("backward: loss belongs to a different tape")
        if loss.data.size != 1:
            raise AutodiffError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: list[Array | None] = [None] * len(self._nodes)
        grads[loss.node_id] = np.ones_like(loss.data)
        # Reverse creation order; stored grad arrays are never mutated in
        # place, so rules may safely return views of the output gradient.
        for node in reversed(self._nodes[: loss.node_id + 1]):
            g = grads[node.node_id]
            if g is None or node.backward_rule is None:
                continue
            contribs = node.backward_rule(g)
            for parent, contrib in zip(node.parents, contribs):
                pid = parent.node_id
                grads[pid] = contrib if grads[pid] is None else grads[pid] + contrib
        return grads


# -- elementwise binary primitives ---------------------------------------

def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return a.tape.op("add", a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return a.tape.op("sub", a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("mul", a, b)
    sa, sb = a.shape, b.shape
    da, db = a.data, b.data
    return a.tape.op("mul", da * db, (a, b),
                     lambda g: (_unbroadcast(g * db, sa), _unbroadcast(g * da, sb)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError("div", "division by zero")
    sa, sb = a.shape, b.shape
    da, db = a.data, b.data
    return a.tape.op("div", da / db, (a, b),
                     lambda g: (_unbroadcast(g / db, sa),
                                _unbroadcast(-g * da / (db * db), sb)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    da, db = a.data, b.data
    return a.tape.op("matmul", da @ db, (a, b),
                     lambda g: (g @ db.T, da.T @ g))


# -- elementwise unary primitives ----------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    return x.tape.op("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return x.tape.op("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return x.tape.op("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise DomainError("log", "argument must be strictly positive")
    d = x.data
    return x.tape.op("log", np.log(d), (x,), lambda g: (g / d,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0.0):
        raise DomainError("sqrt", "argument must be non-negative")
    y = np.sqrt(x.data)
    return x.tape.op("sqrt", y, (x,), lambda g: (g / (2.0 * y),))


def absolute(x: Tensor) -> Tensor:
    d = x.data
    return x.tape.op("abs", np.abs(d), (x,), lambda g: (g * np.sign(d),))


def square(x: Tensor) -> Tensor:
    d = x.data
    return x.tape.op("square", d * d, (x,), lambda g: (g * 2.0 * d,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through only where unclamped."""
    d = x.data
    mask = (d >= lo) & (d <= hi)
    return x.tape.op("clip", np.clip(d, lo, hi), (x,), lambda g: (g * mask,))


# -- reductions and shape ops --------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    d = x.data
    value = d.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array) -> tuple[Array, ...]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, d.shape).copy(),)

    return x.tape.op("sum", np.asarray(value, dtype=np.float64), (x,), backward)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    d = x.data
    value = d.mean(axis=axis, keepdims=keepdims)
    count = d.size // max(value.size, 1)

    def backward(g: Array) -> tuple[Array, ...]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, d.shape).copy(),)

    return x.tape.op("mean", np.asarray(value, dtype=np.float64), (x,), backward)


def reshape(x: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = x.data.shape
    return x.tape.op("reshape", x.data.reshape(shape), (x,),
                     lambda g: (g.reshape(old),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        value = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeMismatchError("broadcast", x.shape, shape) from None
    old = x.data.shape
    return x.tape.op("broadcast", np.array(value, dtype=np.float64), (x,),
                     lambda g: (_unbroadcast(g, old),))


def row_softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis of a 1-D or 2-D tensor.

    Backward uses the Jacobian-vector product y*(g - <g, y>) per row
    instead of materializing the full Jacobian.
    """
    if x.data.ndim not in (1, 2):
        raise ShapeMismatchError("row_softmax", x.shape, ("1-D or 2-D",))
    d = x.data
    shifted = d - d.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g: Array) -> tuple[Array, ...]:
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return x.tape.op("row_softmax", y, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise AutodiffError("concat: need at least one tensor")
    tape = tensors[0].tape
    value = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g: Array) -> tuple[Array, ...]:
        return tuple(np.split(g, splits, axis=axis))

    return tape.op("concat", value, tuple(tensors), backward)


# -- verification ----------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between the taped gradient of scalar ``f`` and
    central finite differences, normalized by max(1, |analytic|, |numeric|).
    """
    if not (0.0 < eps <= 1e-3):
        raise ValueError(f"eps must be in (0, 1e-3], got {eps}")
    x = _as_array(x)

    tape = Tape()
    xt = tape.leaf(x)
    out = f(xt)
    if out.data.size != 1:
        raise AutodiffError(f"grad_check: f must return a scalar, got shape {out.shape}")
    analytic = tape.gradients(out, [xt])[0]

    def value_at(arr: Array) -> float:
        t = Tape()
        return float(f(t.leaf(arr)).data.reshape(()))

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = value_at(x)
        flat[i] = orig - eps
        fm = value_at(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError("grad_check", f"non-finite value at coordinate {i}")
        nflat[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))
