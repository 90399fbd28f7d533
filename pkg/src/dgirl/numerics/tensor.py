"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every op that touches a :class:`Tensor` records its parents and a closure
mapping the output gradient to parent gradients.  :func:`backward` replays
that graph in reverse topological order and accumulates into leaf tensors.

The module-level functions (``sigmoid``, ``log_softmax``, ``concat`` ...)
also accept plain ndarrays and then compute without recording anything.
Model code is written once against these functions and runs either on
parameter tensors (training) or on raw arrays (sampling, scoring).
"""

import numpy as np

from ..errors import ContractViolation, UsageError

_FREED = object()


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    __array_ufunc__ = None  # ndarray <op> Tensor defers to the reflected Tensor op

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self):
        return float(self.value)

    def detach(self):
        return Tensor(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward):
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _is_tensor(*xs):
    return any(isinstance(x, Tensor) for x in xs)


# elementwise ---------------------------------------------------------------

def add(a, b):
    if not _is_tensor(a, b):
        return np.add(a, b)
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    if not isinstance(a, Tensor):
        return np.negative(a)
    return _node(-a.value, (a,), lambda g: (-g,))


def mul(a, b):
    if not _is_tensor(a, b):
        return np.multiply(a, b)
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def reciprocal(a):
    if not isinstance(a, Tensor):
        return 1.0 / np.asarray(a, dtype=np.float64)
    out = 1.0 / a.value
    return _node(out, (a,), lambda g: (-g * out * out,))


def exp(a):
    if not isinstance(a, Tensor):
        return np.exp(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    if not isinstance(a, Tensor):
        return np.log(a)
    av = a.value
    return _node(np.log(av), (a,), lambda g: (g / av,))


def tanh(a):
    if not isinstance(a, Tensor):
        return np.tanh(a)
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_np(x):
    return 0.5 * (np.tanh(0.5 * np.asarray(x, dtype=np.float64)) + 1.0)


def sigmoid(a):
    if not isinstance(a, Tensor):
        return _sigmoid_np(a)
    out = _sigmoid_np(a.value)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    if not isinstance(a, Tensor):
        return np.maximum(a, 0.0)
    mask = a.value > 0
    return _node(a.value * mask, (a,), lambda g: (g * mask,))


def clip(a, lo, hi):
    if not isinstance(a, Tensor):
        return np.clip(a, lo, hi)
    inside = (a.value >= lo) & (a.value <= hi)
    return _node(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


# linear algebra and reductions ----------------------------------------------

def matmul(a, b):
    if not _is_tensor(a, b):
        return np.matmul(a, b)
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation(
            f"matmul expects operands of rank >= 2, got {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[-2]:
        raise ContractViolation(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    def back(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _node(np.matmul(av, bv), (a, b), back)


def sum_(a, axis=None, keepdims=False):
    if not isinstance(a, Tensor):
        return np.sum(a, axis=axis, keepdims=keepdims)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False):
    v = a.value if isinstance(a, Tensor) else np.asarray(a)
    if axis is None:
        n = v.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([v.shape[ax] for ax in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    if not isinstance(a, Tensor):
        return np.reshape(a, shape)
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def _is_advanced(key):
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in keys)


def getitem(a, key):
    if not isinstance(a, Tensor):
        return a[key]
    shape = a.shape
    advanced = _is_advanced(key)

    def back(g):
        z = np.zeros(shape)
        if advanced:
            np.add.at(z, key, g)
        else:
            z[key] = g
        return (z,)

    return _node(a.value[key], (a,), back)


def pick(a, index):
    """Gather ``a[..., index[...]]`` along the last axis."""
    idx = np.asarray(index, dtype=np.int64)[..., None]
    if not isinstance(a, Tensor):
        return np.take_along_axis(a, idx, axis=-1)[..., 0]
    shape = a.shape

    def back(g):
        z = np.zeros(shape)
        np.put_along_axis(z, idx, g[..., None], axis=-1)
        return (z,)

    return _node(np.take_along_axis(a.value, idx, axis=-1)[..., 0], (a,), back)


def concat(xs, axis=-1):
    if not _is_tensor(*xs):
        return np.concatenate(xs, axis=axis)
    xs = [_lift(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([x.value for x in xs], axis=axis), tuple(xs), back)


def stack(xs, axis=0):
    if not _is_tensor(*xs):
        return np.stack(xs, axis=axis)
    xs = [_lift(x) for x in xs]
    n = len(xs)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _node(np.stack([x.value for x in xs], axis=axis), tuple(xs), back)


# normalisers -------------------------------------------------------------------

def _log_softmax_np(x, axis):
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def log_softmax(a, axis=-1):
    if not isinstance(a, Tensor):
        return _log_softmax_np(a, axis)
    out = _log_softmax_np(a.value, axis)
    probs = np.exp(out)
    return _node(out, (a,), lambda g: (g - probs * np.sum(g, axis=axis, keepdims=True),))


def softmax(a, axis=-1):
    if not isinstance(a, Tensor):
        return np.exp(_log_softmax_np(a, axis))
    s = np.exp(_log_softmax_np(a.value, axis))
    return _node(s, (a,), lambda g: (s * (g - np.sum(g * s, axis=axis, keepdims=True)),))


def _logsumexp_np(x, axis, keepdims):
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def logsumexp(a, axis=-1, keepdims=False):
    if not isinstance(a, Tensor):
        return _logsumexp_np(a, axis, keepdims)
    out_k = _logsumexp_np(a.value, axis, True)
    weights = np.exp(a.value - out_k)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return _node(out_k if keepdims else np.squeeze(out_k, axis=axis), (a,), back)


# backward ------------------------------------------------------------------------

def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    The graph is released afterwards; a second call on the same loss, or a
    call on something that was never produced by a recorded op, raises
    :class:`UsageError`.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor produced by a forward pass")
    if loss.value.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None or loss._backward is _FREED:
        raise UsageError("backward called without a recorded forward pass")

    # iterative post-order DFS; a node is emitted only after all its inputs
    order = []
    visited = set()
    stack_ = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack_.append((p, False))

    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is _FREED:
            raise UsageError("graph segment already consumed by an earlier backward")
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=np.float64)
            else:
                node.grad += g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    for node in order:
        if node._backward is not None:
            node._backward = _FREED
            node._parents = ()
