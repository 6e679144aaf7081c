"""A small tensor-valued reverse-mode differentiation engine.

Every operation on a :class:`Tensor` that has a tracked ancestor records its
parents and a vector-Jacobian rule.  The rules are themselves written with
``Tensor`` operations, so calling :func:`grad` with ``create_graph=True``
records the backward pass and the resulting gradients can be differentiated
once more.

Example::

    with GradientTape() as tape:
        x = tape.watch(np.array([1.0, 2.0]))
        s = (x * x).sum()
    tape.gradient(s, [x])   # [Tensor([2., 4.])]
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np


class UnrecordedLeafError(ValueError):
    """Raised when differentiating with respect to a tensor that is not tracked."""


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.tapes: list["GradientTape"] = []


_state = _State()


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def _grad_mode(enabled: bool):
    prev = _state.grad_enabled
    _state.grad_enabled = enabled
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("value", "requires_grad", "_parents", "_backward", "_fn")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._fn = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.value!r}{flag})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return mT(self)

    def numpy(self):
        return self.value

    def detach(self):
        return Tensor(self.value)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents: tuple, backward: Callable, fn: Callable | None) -> Tensor:
    out = Tensor(value)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._fn = fn
        for tape in _state.tapes:
            tape._nodes.append(out)
    return out


# ---------------------------------------------------------------- primitives

def sum_to(a, shape) -> Tensor:
    """Sum ``a`` down to ``shape`` (the adjoint of broadcasting)."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and a.shape[lead + i] != 1)

    def fn(av):
        return av.sum(axis=axes, keepdims=True).reshape(shape)

    return _make(fn(a.value), (a,), lambda g: (broadcast_to(g, a.shape),), fn)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a

    def fn(av):
        return np.broadcast_to(av, shape)

    return _make(fn(a.value), (a,), lambda g: (sum_to(g, a.shape),), fn)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)), np.add)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (sum_to(g, a.shape), sum_to(neg(g), b.shape)), np.subtract)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g: (neg(g),), np.negative)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)),
                 np.multiply)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = div(g, b)
        gb = neg(mul(ga, div(a, b)))
        return sum_to(ga, a.shape), sum_to(gb, b.shape)

    return _make(a.value / b.value, (a, b), backward, np.divide)


def mT(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)

    def fn(av):
        return np.swapaxes(av, -1, -2)

    return _make(fn(a.value), (a,), lambda g: (mT(g),), fn)


def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands need at least two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need ndim >= 2; reshape vectors first")

    def backward(g):
        return sum_to(matmul(g, mT(b)), a.shape), sum_to(matmul(mT(a), g), b.shape)

    return _make(np.matmul(a.value, b.value), (a, b), backward, np.matmul)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def fn(av):
        return np.sum(av, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            kshape = (1,) * a.ndim
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            kshape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
        return (broadcast_to(reshape(g, kshape), a.shape),)

    return _make(fn(a.value), (a,), backward, fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)

    def fn(av):
        return np.reshape(av, shape)

    return _make(fn(a.value), (a,), lambda g: (reshape(g, a.shape),), fn)


def unary(a, deriv: Callable[[np.ndarray, int], np.ndarray], order: int = 0) -> Tensor:
    """Apply the ``order``-th derivative of an elementwise function.

    ``deriv(x, k)`` must return the k-th derivative evaluated at ``x``; the
    backward rule uses order ``k + 1``.
    """
    a = as_tensor(a)

    def fn(av):
        return deriv(av, order)

    return _make(fn(a.value), (a,),
                 lambda g: (mul(g, unary(a, deriv, order + 1)),), fn)


def _exp_deriv(x, k):
    return np.exp(x)


def exp(a) -> Tensor:
    return unary(a, _exp_deriv)


def _log_deriv(x, k):
    if k == 0:
        return np.log(x)
    # d^k/dx^k log x = (-1)^(k-1) (k-1)! / x^k
    fact = 1.0
    for i in range(1, k):
        fact *= i
    return (-1.0) ** (k - 1) * fact / x ** k


def log(a) -> Tensor:
    return unary(a, _log_deriv)


def inv(a) -> Tensor:
    """Batched matrix inverse over the last two axes."""
    a = as_tensor(a)
    out_holder = []

    def backward(g):
        ai = out_holder[0]
        aiT = mT(ai)
        return (neg(matmul(matmul(aiT, g), aiT)),)

    out = _make(np.linalg.inv(a.value), (a,), backward, np.linalg.inv)
    out_holder.append(out)
    return out


def logdet(a) -> Tensor:
    """Batched ``log det`` for matrices with positive determinant."""
    a = as_tensor(a)

    def fn(av):
        sign, ld = np.linalg.slogdet(av)
        if np.any(sign <= 0):
            raise ValueError("logdet: non-positive determinant")
        return ld

    def backward(g):
        gg = reshape(g, g.shape + (1, 1))
        return (mul(gg, mT(inv(a))),)

    return _make(fn(a.value), (a,), backward, fn)


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).value)


def custom(value, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Record a node with a hand-written, first-order-only backward rule.

    ``backward(g)`` receives the cotangent as an ndarray and returns one
    ndarray (or None) per parent.
    """
    parents = tuple(as_tensor(p) for p in parents)

    def wrapped(g):
        if _state.grad_enabled:
            raise NotImplementedError("custom node does not support create_graph=True")
        return tuple(None if r is None else Tensor(r) for r in backward(g.value))

    return _make(np.asarray(value, dtype=np.float64), parents, wrapped, None)


# ---------------------------------------------------------------- gradients

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, inputs: Sequence[Tensor], grad_output=None,
         create_graph: bool = False) -> list[Tensor]:
    """Reverse-mode gradients of ``output`` with respect to ``inputs``.

    ``output`` must be a scalar unless ``grad_output`` (the cotangent) is
    given.  Inputs the output does not depend on get zero gradients.
    """
    for i, x in enumerate(inputs):
        if not isinstance(x, Tensor) or not x.requires_grad:
            raise UnrecordedLeafError(f"input {i} is not a tracked tensor")
    if grad_output is None:
        if output.value.size != 1:
            raise ValueError("grad of a non-scalar output needs grad_output")
        seed = Tensor(np.ones_like(output.value))
    else:
        seed = as_tensor(grad_output)
    grads: dict[int, Tensor] = {}
    if output.requires_grad:
        order = _toposort(output)
        input_ids = {id(x) for x in inputs}
        # only nodes with an input among their ancestors (or inputs) carry gradient
        needed: set[int] = set()
        for node in order:
            if id(node) in input_ids or any(id(p) in needed for p in node._parents):
                needed.add(id(node))
        grads[id(output)] = seed
        with _grad_mode(create_graph):
            for node in reversed(order):
                g = grads.get(id(node))
                if g is None or node._backward is None:
                    continue
                if not any(id(p) in needed for p in node._parents):
                    continue
                if not create_graph and id(node) not in input_ids:
                    del grads[id(node)]
                pgrads = node._backward(g)
                for p, pg in zip(node._parents, pgrads):
                    if pg is None or id(p) not in needed:
                        continue
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else add(prev, pg)
    return [grads.get(id(x), Tensor(np.zeros_like(x.value))) for x in inputs]


class GradientTape:
    """Records operations executed inside its context.

    ``watch`` registers a leaf; ``gradient`` only accepts registered leaves
    (or nodes recorded on this tape); ``replay`` re-executes the recorded
    operations from (optionally new) leaf values.
    """

    def __init__(self):
        self._nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []

    def __enter__(self):
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.remove(self)
        return False

    def watch(self, value) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self.leaves.append(t)
        return t

    def _known(self, t: Tensor) -> bool:
        return any(t is x for x in self.leaves) or any(t is n for n in self._nodes)

    def gradient(self, target: Tensor, sources: Sequence[Tensor], grad_output=None,
                 create_graph: bool = False) -> list[Tensor]:
        for i, s in enumerate(sources):
            if not isinstance(s, Tensor) or not self._known(s):
                raise UnrecordedLeafError(f"source {i} was not recorded on this tape")
        return grad(target, sources, grad_output, create_graph)

    @property
    def operations(self) -> list[Tensor]:
        return list(self._nodes)

    def replay(self, target: Tensor, leaf_values: dict | None = None):
        """Recompute ``target`` by re-running the recorded operations.

        ``leaf_values`` maps watched leaves (by identity, as a list index or
        the tensor itself) to replacement values.
        """
        vals: dict[int, np.ndarray] = {}
        for i, leaf in enumerate(self.leaves):
            v = leaf.value
            if leaf_values:
                if i in leaf_values:
                    v = np.asarray(leaf_values[i], dtype=np.float64)
                for k, nv in leaf_values.items():
                    if isinstance(k, Tensor) and k is leaf:
                        v = np.asarray(nv, dtype=np.float64)
            vals[id(leaf)] = v
        for node in self._nodes:
            if node._fn is None:
                raise NotImplementedError("tape contains a non-replayable custom node")
            args = [vals.get(id(p), p.value) for p in node._parents]
            vals[id(node)] = node._fn(*args)
            if node is target:
                break
        if id(target) not in vals:
            raise UnrecordedLeafError("target was not recorded on this tape")
        return vals[id(target)]
