"""A small reverse-mode autodiff over NumPy arrays.

Only the primitives the router-attention model needs are provided.  Every
forward primitive checks its output for NaN/Inf and raises
:class:`NonFiniteError` instead of propagating garbage.

Gradients accumulate into leaf ``Node.grad`` additively; call
:func:`zero_grad` between optimizer steps.  Calling :func:`backward` twice on
the same graph without resetting therefore doubles the leaf gradients.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class NonFiniteError(ArithmeticError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op")

    def __init__(self, value, parents: tuple = (), backward_fn: Callable | None = None,
                 requires_grad: bool = False, op: str = "leaf"):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(value: np.ndarray) -> Node:
    return Node(_check(np.asarray(value), "parameter"), requires_grad=True)


def constant(value) -> Node:
    if isinstance(value, Node):
        return value
    return Node(np.asarray(value))


def _check(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    return value


def _make(value, parents: Sequence[Node], backward_fn, op: str) -> Node:
    _check(value, op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Node(value, tuple(parents), backward_fn, requires_grad=True, op=op)
    return Node(value, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise / structural ------------------------------------------------

def add(a, b) -> Node:
    a, b = constant(a), constant(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Node:
    a, b = constant(a), constant(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Node:
    a, b = constant(a), constant(b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
                 "mul")


def scale(a: Node, c: float) -> Node:
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Node:
    a, b = constant(a), constant(b)

    def back(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.value @ b.value, (a, b), back, "matmul")


def transpose(a: Node, axes: Sequence[int] | None = None) -> Node:
    axes = tuple(reversed(range(a.value.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a: Node, shape: Sequence[int]) -> Node:
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = [constant(n) for n in nodes]
    sizes = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes), back, "concat")


def take_rows(a: Node, index) -> Node:
    """Select rows (first axis) by slice or integer array."""
    shape = a.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.value[index], (a,), back, "take_rows")


def broadcast_rows(a: Node, rows: int) -> Node:
    """Tile a vector-like ``(1, c)`` or ``(c,)`` node to ``(rows, c)``."""
    shape = a.shape
    out = np.broadcast_to(a.value.reshape(1, -1), (rows, a.value.size)).copy()
    return _make(out, (a,), lambda g: (g.sum(axis=0).reshape(shape),), "broadcast_rows")


def sum_all(a: Node) -> Node:
    shape = a.shape
    return _make(np.asarray(a.value.sum()), (a,), lambda g: (np.full(shape, g, dtype=a.dtype),), "sum")


def mean_all(a: Node) -> Node:
    shape, n = a.shape, a.value.size
    return _make(np.asarray(a.value.mean()), (a,),
                 lambda g: (np.full(shape, g / n, dtype=a.dtype),), "mean")


def mean_nodes(nodes: Sequence[Node]) -> Node:
    total = nodes[0]
    for n in nodes[1:]:
        total = add(total, n)
    return scale(total, 1.0 / len(nodes))


# -- nonlinearities ----------------------------------------------------------

def softmax_rows(x: Node) -> Node:
    """Softmax over the last axis with max subtraction."""
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), back, "softmax")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Node) -> Node:
    """tanh-approximated GELU."""
    v = x.value
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _make(y, (x,), back, "gelu")


def layer_norm(x: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
    """Normalize each row over the last axis (biased variance), then affine."""
    v = x.value
    c = v.shape[-1]
    if c < 2:
        raise ValueError("layer_norm needs at least 2 features")
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.value + bias.value

    def back(g):
        gxhat = g * gain.value
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, c).sum(axis=0).reshape(gain.shape)
        gb = g.reshape(-1, c).sum(axis=0).reshape(bias.shape)
        return gx, gg, gb

    return _make(y, (x, gain, bias), back, "layer_norm")


def cross_entropy_mean(logits: Node, labels) -> Node:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if np.any((labels < 0) | (labels >= k)) or not np.all(labels == np.round(labels)):
        raise ValueError("labels must be class indices in {0, 1}")
    labels = labels.astype(np.int64)
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), back, "cross_entropy")


# -- backward / optimization --------------------------------------------------

def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    state: dict[int, int] = {}  # 1 = visiting, 2 = done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        if state.get(key) == 2:
            continue
        if state.get(key) == 1:
            raise RuntimeError("cycle detected in computation graph")
        state[key] = 1
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and state.get(id(p)) != 2:
                if state.get(id(p)) == 1:
                    raise RuntimeError("cycle detected in computation graph")
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    if loss.value.size != 1:
        raise ValueError("backward() needs a scalar loss")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Node]) -> None:
    for p in params:
        p.grad = None


class AdamState:
    """First/second moment buffers keyed by parameter name."""

    def __init__(self, params: dict[str, Node]):
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = 0


def adam_step(params: dict[str, Node], state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.value)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.value.dtype)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad
