"""Dense float32 tensors with reverse-mode automatic differentiation.

Define-by-run: every operation evaluates eagerly on numpy float32 data and,
when an input participates in gradient tracking, records its parents and a
backward rule on the result. ``backward`` walks that record once, in reverse
topological order, and returns the gradients of the trainable leaves.

Shape discipline is strict: binary elementwise operations accept equal shapes
or a 0-d scalar against anything else. The one sanctioned broadcast beyond
that is ``add_bias`` (trailing-axis vector add), so dense-layer biases and
embedding rows never rely on implicit broadcasting.

Reductions accumulate in float64 before rounding back to float32.

Graph construction and backward are single-threaded; independent graphs on
separate threads are fine because tensors share no mutable state once built.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(RuntimeError):
    """The autodiff graph was used in an unsupported way."""


class DomainError(ValueError):
    """An operand is outside the mathematical domain of the operation."""


_BackwardRule = Callable[[np.ndarray], Iterable[tuple["Tensor", np.ndarray]]]


class Tensor:
    """A float32 array plus an optional record of how it was computed."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    # Count of tensors currently holding a backward record. Lets callers
    # assert that training keeps only a bounded graph alive at a time.
    _live_graph_nodes = 0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: _BackwardRule | None = None

    def _record(self, parents: tuple["Tensor", ...], rule: _BackwardRule) -> "Tensor":
        self._parents = parents
        self._backward = rule
        self.requires_grad = True
        Tensor._live_graph_nodes += 1
        return self

    def __del__(self):
        if self._backward is not None:
            try:
                Tensor._live_graph_nodes -= 1
            except Exception:
                pass

    # -- inspection --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- sugar --------------------------------------------------------------

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def detach(self) -> "Tensor":
        return detach(self)


def as_tensor(value) -> Tensor:
    """Wrap plain data as a constant (non-trainable) tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def live_graph_nodes() -> int:
    """Number of tensors currently holding a backward record."""
    return Tensor._live_graph_nodes


def graph_size(t: Tensor) -> int:
    """Count of recorded operation nodes reachable from ``t``."""
    seen: set[int] = set()
    stack = [t]
    count = 0
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._backward is not None:
            count += 1
            stack.extend(node._parents)
    return count


# -- helpers ----------------------------------------------------------------


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _check_elementwise(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(
        f"{name}: shapes {a.shape} and {b.shape} differ "
        "(only scalar-with-tensor mixing is allowed)"
    )


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Collapse a gradient onto a (possibly scalar) parent shape."""
    if grad.shape == shape:
        return grad
    # Parent was the 0-d side of a scalar-tensor op: sum every element.
    return np.asarray(grad.sum(dtype=np.float64), dtype=np.float32).reshape(shape)


def _sum_leading(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return np.asarray(grad, dtype=np.float32)


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("add", a, b)
    out = Tensor(a.data + b.data)
    if _needs_grad(a, b):
        out._record((a, b), lambda g: ((a, _reduce_to(g, a.shape)),
                                       (b, _reduce_to(g, b.shape))))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("sub", a, b)
    out = Tensor(a.data - b.data)
    if _needs_grad(a, b):
        out._record((a, b), lambda g: ((a, _reduce_to(g, a.shape)),
                                       (b, _reduce_to(-g, b.shape))))
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("mul", a, b)
    out = Tensor(a.data * b.data)
    if _needs_grad(a, b):
        out._record((a, b), lambda g: ((a, _reduce_to(g * b.data, a.shape)),
                                       (b, _reduce_to(g * a.data, b.shape))))
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError("div: divisor contains zero")
    out = Tensor(a.data / b.data)
    if _needs_grad(a, b):
        def rule(g):
            return (
                (a, _reduce_to(g / b.data, a.shape)),
                (b, _reduce_to(-g * a.data / (b.data * b.data), b.shape)),
            )
        out._record((a, b), rule)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    if a.requires_grad:
        out._record((a,), lambda g: ((a, -g),))
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    if a.requires_grad:
        mask = (a.data > 0.0).astype(np.float32)
        out._record((a,), lambda g: ((a, g * mask),))
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data.astype(np.float64)))
    out = Tensor(y)
    if a.requires_grad:
        yd = out.data
        out._record((a,), lambda g: ((a, g * yd * (1.0 - yd)),))
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: operand must be strictly positive")
    out = Tensor(np.log(a.data))
    if a.requires_grad:
        out._record((a,), lambda g: ((a, g / a.data),))
    return out


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product. 2-d x 2-d, or stacked with exactly matching leading
    dims; a 2-d operand against a stacked one acts as a shared weight."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions must match exactly, got {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    if _needs_grad(a, b):
        def rule(g):
            bt = np.swapaxes(b.data, -1, -2)
            at = np.swapaxes(a.data, -1, -2)
            if b.ndim == 2 and g.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _sum_leading(at @ g, b.shape)
            ga = _sum_leading(g @ bt, a.shape)
            return ((a, ga), (b, gb))
        out._record((a, b), rule)
    return out


def add_bias(a, bias) -> Tensor:
    """Add a vector along the trailing axis of ``a``."""
    a, bias = as_tensor(a), as_tensor(bias)
    if bias.ndim != 1 or a.ndim < 1 or a.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: cannot add vector {bias.shape} along trailing axis of {a.shape}")
    out = Tensor(a.data + bias.data)
    if _needs_grad(a, bias):
        def rule(g):
            gb = g.reshape(-1, bias.shape[0]).sum(axis=0, dtype=np.float64)
            return ((a, g), (bias, np.asarray(gb, dtype=np.float32)))
        out._record((a, bias), rule)
    return out


def transpose_last2(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose_last2: need at least 2 dims, got {a.shape}")
    out = Tensor(np.swapaxes(a.data, -1, -2).copy())
    if a.requires_grad:
        out._record((a,), lambda g: ((a, np.swapaxes(g, -1, -2).copy()),))
    return out


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out = Tensor(a.data.reshape(shape))
    if a.requires_grad:
        out._record((a,), lambda g: ((a, g.reshape(a.shape)),))
    return out


def take(a, index: int) -> Tensor:
    """Select along the first axis: a row of a matrix, a scalar of a vector."""
    a = as_tensor(a)
    if a.ndim == 0:
        raise ShapeError("take: cannot index a 0-d tensor")
    if not 0 <= index < a.shape[0]:
        raise IndexError(f"take: index {index} out of range for first axis of {a.shape}")
    out = Tensor(a.data[index].copy())
    if a.requires_grad:
        def rule(g):
            full = np.zeros(a.shape, dtype=np.float32)
            full[index] = g
            return ((a, full),)
        out._record((a,), rule)
    return out


# -- normalization ------------------------------------------------------------


def softmax(a) -> Tensor:
    """Softmax over the trailing axis (numerically stabilized)."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)
    if a.requires_grad:
        yd = out.data
        def rule(g):
            inner = (g * yd).sum(axis=-1, keepdims=True)
            return ((a, yd * (g - inner)),)
        out._record((a,), rule)
    return out


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean, unit variance (no affine)."""
    a = as_tensor(a)
    if a.ndim < 1 or a.shape[-1] < 1:
        raise ShapeError(f"layer_norm: need a non-empty trailing axis, got {a.shape}")
    x = a.data.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv
    out = Tensor(y)
    if a.requires_grad:
        yd = y
        def rule(g):
            g64 = g.astype(np.float64)
            gm = g64.mean(axis=-1, keepdims=True)
            gy = (g64 * yd).mean(axis=-1, keepdims=True)
            return ((a, np.asarray((g64 - gm - yd * gy) * inv, dtype=np.float32)),)
        out._record((a,), rule)
    return out


# -- reductions ----------------------------------------------------------------


def _check_nonempty(name: str, a: Tensor) -> None:
    if a.size == 0:
        raise ShapeError(f"{name}: tensor is empty")


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    _check_nonempty("sum", a)
    out = Tensor(np.float32(a.data.sum(dtype=np.float64)))
    if a.requires_grad:
        out._record((a,), lambda g: ((a, np.full(a.shape, g, dtype=np.float32)),))
    return out


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    _check_nonempty("mean", a)
    n = a.size
    out = Tensor(np.float32(a.data.sum(dtype=np.float64) / n))
    if a.requires_grad:
        out._record((a,), lambda g: ((a, np.full(a.shape, g / n, dtype=np.float32)),))
    return out


def l2_norm(a) -> Tensor:
    """Euclidean norm over all elements; gradient is 0 at the origin."""
    a = as_tensor(a)
    _check_nonempty("l2_norm", a)
    x = a.data.astype(np.float64)
    norm = float(np.sqrt((x * x).sum()))
    out = Tensor(np.float32(norm))
    if a.requires_grad:
        denom = max(norm, np.finfo(np.float64).tiny)
        def rule(g):
            return ((a, np.asarray(float(g) * a.data / denom, dtype=np.float32)),)
        out._record((a,), rule)
    return out


# -- graph control --------------------------------------------------------------


def detach(a) -> Tensor:
    """Same value, severed from the graph; backward never crosses it."""
    a = as_tensor(a)
    return Tensor(a.data.copy())


def _toposort(root: Tensor) -> list[Tensor]:
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
            if id(parent) not in seen and (parent.requires_grad or parent._backward is not None):
                stack.append((parent, False))
    order.reverse()  # root first
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(node) through the recorded graph.

    Returns a map from trainable leaf tensors to their gradients; the same
    arrays are accumulated into each leaf's ``grad``. The loss must be a
    scalar; its own seed gradient is 1.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward: loss must be a Tensor")
    if loss.ndim != 0:
        raise GraphError(f"backward: loss must be a scalar, got shape {loss.shape}")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float32)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
                leaf_grads[node] = node.grad
            continue
        for parent, pg in node._backward(g):
            if not (parent.requires_grad or parent._backward is not None):
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return leaf_grads


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
