"""Minimal reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray plus an optional gradient; operations build an
acyclic tape whose backward pass accumulates gradients in reverse topological
order. Dtype follows the wrapped arrays, so the same model code runs in
float32 for training and float64 for finite-difference validation.

Set ``debug_checks(True)`` to assert every op output is finite (slow; meant
for tests chasing numerical bugs).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class NnError(Exception):
    pass


class ShapeMismatch(NnError):
    pass


class NotScalarLoss(NnError):
    pass


class GraphCycle(NnError):
    pass


_DEBUG_CHECKS = False


def debug_checks(enabled: bool) -> None:
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # --- graph construction -----------------------------------------------

    @staticmethod
    def _op(
        data: np.ndarray,
        parents: tuple["Tensor", ...],
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    ) -> "Tensor":
        if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
            raise NnError("op produced non-finite values")
        out = Tensor(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # --- backward pass ------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into all reachable leaves."""
        if self.data.size != 1:
            raise NotScalarLoss(f"loss must be scalar, got shape {self.data.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.astype(parent.data.dtype, copy=False)
                else:
                    parent.grad = parent.grad + g
            if node is not self and not node.is_leaf:
                node.grad = None  # free intermediate grads

    def zero_grad(self) -> None:
        self.grad = None


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative DFS postorder with defensive cycle detection."""
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 0 = on stack (gray), 1 = done (black)
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            state[id(node)] = 1
            order.append(node)
            continue
        mark = state.get(id(node))
        if mark == 1:
            continue
        if mark == 0:
            raise GraphCycle("computation graph contains a cycle")
        state[id(node)] = 0
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and state.get(id(parent)) != 1:
                if state.get(id(parent)) == 0:
                    raise GraphCycle("computation graph contains a cycle")
                stack.append((parent, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- primitive ops ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return Tensor._op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Tensor._op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Tensor._op(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor._op(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return Tensor._op(a.data @ b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._op(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return Tensor._op(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._op(out, (x,), lambda g: (g * (1.0 - out * out),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = x.data.shape
    return Tensor._op(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return Tensor._op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def index(x: Tensor, idx) -> Tensor:
    """Basic (non-repeating) slicing."""

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return Tensor._op(x.data[idx], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._op(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._op(
        np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward
    )


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return Tensor._op(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        ax = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.data.shape[a] for a in ax]))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, x.data.shape).copy(),)

    return Tensor._op(x.data.mean(axis=axis, keepdims=keepdims), (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Stable mean (or sum) of -log softmax(logits)[label] over the batch.

    Accepts (B, C) logits with B integer labels, or a single (C,) row.
    """
    single = logits.data.ndim == 1
    z = logits.data if not single else logits.data[None, :]
    y = np.atleast_1d(np.asarray(labels))
    if z.ndim != 2:
        raise ShapeMismatch(f"logits must be (B, C) or (C,), got {logits.data.shape}")
    if y.shape != (z.shape[0],):
        raise ShapeMismatch(
            f"labels shape {y.shape} does not match batch size {z.shape[0]}"
        )
    if not np.all(np.isfinite(z)):
        raise NnError("logits contain non-finite values")
    shifted = z - z.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    losses = -log_p[np.arange(len(y)), y]
    if reduction == "mean":
        value = losses.mean()
    elif reduction == "sum":
        value = losses.sum()
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        grad = np.exp(log_p)
        grad[np.arange(len(y)), y] -= 1.0
        if reduction == "mean":
            grad /= len(y)
        grad = grad * g
        return (grad[0] if single else grad,)

    return Tensor._op(np.asarray(value, dtype=z.dtype), (logits,), backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Plain-array stable log-softmax over the last axis (inference helper)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
