"""Small reverse-mode autodiff engine over float64 numpy arrays.

Each differentiable op builds a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
:func:`backward` walks the graph in reverse topological order.

Only the broadcasting the model needs is supported: numpy broadcasting on
elementwise binary ops, with gradients summed back to the input shape.
"""

from __future__ import annotations

import numpy as np

PROB_EPS = 1e-7
_SIGMOID_HI = np.nextafter(1.0, 0.0)
_SIGMOID_LO = np.finfo(np.float64).tiny


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat view of the data."""
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _fail_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


# activations

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep outputs strictly inside (0, 1) even when exp saturates
    return np.clip(out, _SIGMOID_LO, _SIGMOID_HI)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid_np(x),))


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction."""
    a = as_tensor(a)
    if a.shape[axis] < 1:
        raise ValueError("softmax over an empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


# reductions and shape ops

def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def column(a, j: int) -> Tensor:
    """Column ``j`` of a 2-D tensor, kept as shape [n, 1]."""
    a = as_tensor(a)

    def bw(g):
        out = np.zeros_like(a.data)
        out[:, j : j + 1] = g
        return (out,)

    return _make(a.data[:, j : j + 1].copy(), (a,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def detach(a) -> Tensor:
    """Same values, cut from the graph."""
    a = as_tensor(a)
    return Tensor(a.data)


# linear algebra and model-specific ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: [{a.shape[0]}x{a.shape[1]}] @ [{b.shape[0]}x{b.shape[1]}]"
        )

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


def outer_product(a, b) -> Tensor:
    """Flattened outer product; row-wise when both inputs are 2-D.

    Entry ``i*q + j`` of the output is ``a[i] * b[j]``.
    """
    a, b = as_tensor(a), as_tensor(b)
    batched = a.data.ndim == 2
    A = a.data if batched else a.data[None, :]
    B = b.data if batched else b.data[None, :]
    if A.shape[0] != B.shape[0]:
        raise ValueError(f"outer_product batch mismatch: {a.shape} vs {b.shape}")
    n, p = A.shape
    q = B.shape[1]
    out = (A[:, :, None] * B[:, None, :]).reshape(n, p * q)

    def bw(g):
        G = g.reshape(n, p, q)
        ga = (G * B[:, None, :]).sum(axis=2)
        gb = (G * A[:, :, None]).sum(axis=1)
        if not batched:
            ga, gb = ga[0], gb[0]
        return ga, gb

    return _make(out if batched else out[0], (a, b), bw)


def embedding(table, index) -> Tensor:
    """Row lookup ``table[index]``; gradients scatter-add into the table."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index, g)
        return (gt,)

    return _make(table.data[index], (table,), bw)


def mix_experts(gates, experts) -> Tensor:
    """Convex mixture ``out[b] = sum_e gates[b, e] * experts[b, e, :]``."""
    gates, experts = as_tensor(gates), as_tensor(experts)
    G, E = gates.data, experts.data
    out = np.matmul(G[:, None, :], E)[:, 0, :]

    def bw(g):
        gg = np.matmul(E, g[:, :, None])[:, :, 0] if gates.requires_grad else None
        ge = G[:, :, None] * g[:, None, :] if experts.requires_grad else None
        return gg, ge

    return _make(out, (gates, experts), bw)


def binary_cross_entropy(p, y, eps: float = PROB_EPS) -> Tensor:
    """Elementwise ``-[y log p + (1-y) log(1-p)]`` with p clamped to [eps, 1-eps].

    ``y`` may hold soft targets in [0, 1].
    """
    p, y = as_tensor(p), as_tensor(y)
    pc = np.clip(p.data, eps, 1.0 - eps)
    inside = (p.data >= eps) & (p.data <= 1.0 - eps)
    lp, l1p = np.log(pc), np.log1p(-pc)
    out = -(y.data * lp + (1.0 - y.data) * l1p)

    def bw(g):
        gp = _unbroadcast(g * inside * (pc - y.data) / (pc * (1.0 - pc)), p.shape) if p.requires_grad else None
        gy = _unbroadcast(g * (l1p - lp), y.shape) if y.requires_grad else None
        return gp, gy

    return _make(out, (p, y), bw)


# backward pass

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every requires-grad ancestor of a scalar ``root``.

    Leaf gradients accumulate across calls; the graph under ``root`` is
    released afterwards, so a second call on the same root raises.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise RuntimeError("backward already ran on this root; rebuild the graph first")
    if not root.requires_grad:
        raise ValueError("backward root is detached from any trainable tensor")
    order = _topological_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if node._parents:
            node._parents = ()
            node._backward = None
    root._consumed = True
