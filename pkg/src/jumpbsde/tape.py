"""Minimal reverse-mode automatic differentiation on numpy arrays.

A :class:`Tensor` records the operation that produced it.  Calling
:func:`backward` on a scalar tensor walks the recorded graph in reverse
creation order and accumulates gradients on every tensor that has
``requires_grad`` set.  Backward rules are themselves written with tensor
operations, so gradients of expressions that already contain derivatives
(the spatial gradient of a network inside a loss) come out exactly.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

from .errors import TapeMismatch

_ids = itertools.count()
_recording = [True]


@contextmanager
def no_grad():
    """Evaluate without recording operations."""
    previous = _recording[0]
    _recording[0] = False
    try:
        yield
    finally:
        _recording[0] = previous


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = len(grad.shape) - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __array_ufunc__ = None  # make ndarray (op) Tensor defer to Tensor

    def __init__(self, value, requires_grad=False, parents=(), name=None):
        self.value = np.asarray(value, dtype=float)
        self.requires_grad = bool(requires_grad)
        self.parents = parents  # tuple of (tensor, rule) with rule(grad) -> Tensor grad
        self.grad = None
        self.name = name
        self.id = next(_ids)

    # basic protocol
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.value

    # construction helper
    @staticmethod
    def _make(value, *links):
        live = tuple((t, rule) for t, rule in links if isinstance(t, Tensor) and t.requires_grad)
        if not live or not _recording[0]:
            return Tensor(value)
        return Tensor(value, requires_grad=True, parents=live)

    # arithmetic
    def __add__(self, other):
        other_t = as_tensor(other)
        a, b = self.shape, other_t.shape
        return Tensor._make(
            self.value + other_t.value,
            (self, lambda g: sum_to(g, a)),
            (other_t, lambda g: sum_to(g, b)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.value, (self, lambda g: -g))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other_t = as_tensor(other)
        a, b = self.shape, other_t.shape
        return Tensor._make(
            self.value * other_t.value,
            (self, lambda g: sum_to(g * other_t, a)),
            (other_t, lambda g: sum_to(g * self, b)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other_t = as_tensor(other)
        if not other_t.requires_grad:
            return self * (1.0 / other_t.value)
        return self * other_t ** -1.0

    def __rtruediv__(self, other):
        return as_tensor(other) * self ** -1.0

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("tensor exponents are not supported")
        p = float(exponent)
        if p == 2.0:
            return self * self
        return Tensor._make(self.value ** p, (self, lambda g: g * (p * self ** (p - 1.0))))

    def __matmul__(self, other):
        other_t = as_tensor(other)
        return Tensor._make(
            self.value @ other_t.value,
            (self, lambda g: g @ other_t.T),
            (other_t, lambda g: self.T @ g),
        )

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    # shape manipulation
    @property
    def T(self):
        return Tensor._make(self.value.T, (self, lambda g: g.T))

    def reshape(self, *shape):
        old = self.shape
        return Tensor._make(self.value.reshape(*shape), (self, lambda g: g.reshape(old)))

    def __getitem__(self, index):
        shape = self.shape

        def rule(g):
            return scatter(g, index, shape)

        return Tensor._make(self.value[index], (self, rule))

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def rule(g):
            if axis is not None and not keepdims:
                g = expand_dims(g, axis)
            return broadcast_to(g, shape)

        return Tensor._make(self.value.sum(axis=axis, keepdims=keepdims), (self, rule))

    def mean(self, axis=None, keepdims=False):
        count = self.value.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def sum_to(g, shape):
    if g.shape == shape:
        return g
    target = _unbroadcast(g.value, shape)
    return Tensor._make(target, (g, lambda h: broadcast_to(h, g.shape)))


def broadcast_to(g, shape):
    g = as_tensor(g)
    if g.shape == shape:
        return g
    old = g.shape
    return Tensor._make(np.broadcast_to(g.value, shape).copy(), (g, lambda h: sum_to(h, old)))


def expand_dims(g, axis):
    old = g.shape
    return Tensor._make(np.expand_dims(g.value, axis), (g, lambda h: h.reshape(old)))


def scatter(g, index, shape):
    """Place ``g`` into a zero array of ``shape`` at ``index`` (adjoint of slicing)."""
    out = np.zeros(shape)
    np.add.at(out, index, g.value)
    return Tensor._make(out, (g, lambda h: h[index]))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    links = []
    for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
        index = (slice(None),) * (axis % tensors[0].ndim) + (slice(int(lo), int(hi)),)
        links.append((t, lambda g, index=index: g[index]))
    return Tensor._make(np.concatenate([t.value for t in tensors], axis=axis), *links)


# elementwise functions usable on both arrays and tensors

def sigmoid(x):
    if not isinstance(x, Tensor):
        return _sigmoid(x)
    s = _sigmoid(x.value)
    out = Tensor._make(s, (x, lambda g: g * sigmoid_prime_of_output(out)))
    return out


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(a, dtype=float)))


def sigmoid_prime_of_output(s):
    """Derivative of the sigmoid expressed through its output ``s``."""
    return s * (1.0 - s)


def tanh(x):
    if not isinstance(x, Tensor):
        return np.tanh(x)
    t = np.tanh(x.value)
    out = Tensor._make(t, (x, lambda g: g * tanh_prime_of_output(out)))
    return out


def tanh_prime_of_output(t):
    return 1.0 - t * t


def exp(x):
    if not isinstance(x, Tensor):
        return np.exp(x)
    out = Tensor._make(np.exp(x.value), (x, lambda g: g * out))
    return out


def value_of(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=float)


def backward(loss, create_graph=False):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable tensor.

    With ``create_graph`` the gradients are themselves recorded tensors,
    otherwise they are plain arrays wrapped without history.
    """
    if not isinstance(loss, Tensor) or loss.value.size != 1:
        raise TapeMismatch("backward needs a scalar tensor at the end of the tape")
    order = []
    seen = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen.add(node.id)
        order.append(node)
        for parent, _ in node.parents:
            if parent.id not in seen:
                stack.append(parent)
    order.sort(key=lambda t: t.id, reverse=True)

    grads = {loss.id: Tensor(np.ones_like(loss.value))}
    context = _null() if create_graph else no_grad()
    with context:
        for node in order:
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, rule in node.parents:
                contribution = rule(g)
                prior = grads.get(parent.id)
                grads[parent.id] = contribution if prior is None else prior + contribution


@contextmanager
def _null():
    yield


def grad(loss, leaves):
    """Return gradients of ``loss`` w.r.t. ``leaves`` as numpy arrays."""
    for leaf in leaves:
        leaf.grad = None
    backward(loss)
    return [np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad.value for leaf in leaves]
