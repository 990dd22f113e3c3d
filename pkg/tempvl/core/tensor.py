"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op builds its output eagerly and, when any input tracks gradients,
records a closure mapping the output gradient to one gradient per input.
`backward` walks the recorded graph in reverse topological order.

Broadcasting is limited to leading batch dimensions: the smaller operand's
shape must be a suffix of the larger one's.
"""
from __future__ import annotations

import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64
NEG_INF = -1e9


class _Mode(threading.local):
    """Per-thread recording flags; each thread starts with defaults."""

    grad_enabled = True
    check_finite = False


_mode = _Mode()

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Dense n-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, reciprocal(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


@dataclass
class Graph:
    """Topologically ordered records of the tracked ops behind one output."""

    nodes: List[Tensor]

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
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
        return cls(order)

    def leaves(self) -> List[Tensor]:
        return [node for node in self.nodes if node.is_leaf]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> Graph:
    """Accumulate d loss / d leaf into every tracked leaf's ``grad``.

    Repeated calls without ``zero_grad`` accumulate.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward() called on a tensor that does not track gradients")

    graph = Graph.trace(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + parent_grad
            else:
                pending[key] = parent_grad
    return graph


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block, for the calling thread only."""
    previous = _mode.grad_enabled
    _mode.grad_enabled = False
    try:
        yield
    finally:
        _mode.grad_enabled = previous


def is_grad_enabled() -> bool:
    return _mode.grad_enabled


def set_debug_checks(enabled: bool) -> None:
    """Check every op output for NaN/Inf in the calling thread."""
    _mode.check_finite = enabled


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    tracked = _mode.grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    out._parents = tuple(parents) if tracked else ()
    out._backward = backward_fn if tracked else None
    if _mode.check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from op '{op}'")
    return out


def _is_suffix(short: Tuple[int, ...], long: Tuple[int, ...]) -> bool:
    return len(short) <= len(long) and tuple(long[len(long) - len(short):]) == tuple(short)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or _is_suffix(b.shape, a.shape) or _is_suffix(a.shape, b.shape):
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def _backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result(a.data + b.data, (a, b), _backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def _backward(g):
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return _result(a.data - b.data, (a, b), _backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def _backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), _backward, "mul")


def scale(a: Tensor, factor: Scalar) -> Tensor:
    factor = float(factor)
    return _result(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def reciprocal(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / a.data
    return _result(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def abs_(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    out = 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))
    return _result(out, (a,), lambda g: (g * _gelu_grad(x),), "gelu")


def add_constant(a: Tensor, constant: np.ndarray) -> Tensor:
    """Add an untracked array (e.g. an attention mask bias)."""
    out = a.data + constant
    if out.shape != a.shape:
        raise ShapeError(f"add_constant: constant {np.shape(constant)} would broadcast {a.shape} to {out.shape}")
    return _result(out, (a,), lambda g: (g,), "add_constant")


# ---------------------------------------------------------------------------
# Linear algebra and structure
# ---------------------------------------------------------------------------

def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[..., m, k] @ [k, n] or [..., m, k] @ [..., k, n] with equal batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ between {a.shape} and {b.shape}")

    def _backward(g):
        ga = g @ _swap_last(b.data)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _swap_last(a.data) @ g
        return ga, gb

    return _result(a.data @ b.data, (a, b), _backward, "matmul")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    return _result(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(original),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(data, tensors, _backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def _backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(data, tensors, _backward, "stack")


def take_rows(a: Tensor, index) -> Tensor:
    """Gather along axis 0; ``index`` may have any shape."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise IndexError(f"take_rows: index out of range for {a.shape[0]} rows")

    def _backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result(a.data[index], (a,), _backward, "take_rows")


def getitem(a: Tensor, key) -> Tensor:
    def _backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, key, g)
        return (grad,)

    return _result(np.array(a.data[key]), (a,), _backward, "getitem")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _expand_grad(g: np.ndarray, shape: Tuple[int, ...], axis: Optional[int]) -> np.ndarray:
    if axis is not None:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    shape = a.shape
    return _result(np.sum(a.data, axis=axis), (a,), lambda g: (_expand_grad(g, shape, axis),), "sum")


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = a.shape
    count = a.data.size if axis is None else shape[axis]
    return _result(
        np.mean(a.data, axis=axis), (a,), lambda g: (_expand_grad(g, shape, axis) / count,), "mean"
    )


# ---------------------------------------------------------------------------
# Normalisation and probabilities
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (x,), _backward, "softmax")


def _log_softmax(data: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = data - np.max(data, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = _log_softmax(x.data, axis)

    def _backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _result(out, (x,), _backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    centred = x.data - mu
    var = np.mean(centred * centred, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    out = xhat * gain.data + bias.data

    def _backward(g):
        g_gain = _reduce_to(g * xhat, gain.shape)
        g_bias = _reduce_to(g, bias.shape)
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - np.mean(gx_hat, axis=-1, keepdims=True)
            - xhat * np.mean(gx_hat * xhat, axis=-1, keepdims=True)
        )
        return gx, g_gain, g_bias

    return _result(out, (x, gain, bias), _backward, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise FloatingPointError("l2_normalize: degenerate (zero) embedding")
    out = x.data / norm

    def _backward(g):
        return ((g - out * np.sum(g * out, axis=axis, keepdims=True)) / norm,)

    return _result(out, (x,), _backward, "l2_normalize")


def cross_entropy_from_logits(logits: Tensor, target_index: int) -> Tensor:
    """-log softmax(logits)[target] for a single 1-D logit vector."""
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy_from_logits expects 1-D logits, got shape {logits.shape}")
    n = logits.shape[0]
    if not 0 <= target_index < n:
        raise IndexError(f"target index {target_index} out of range for {n} classes")
    logp = _log_softmax(logits.data)

    def _backward(g):
        grad = np.exp(logp)
        grad[target_index] -= 1.0
        return (grad * g,)

    return _result(np.array(-logp[target_index]), (logits,), _backward, "cross_entropy")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy over all leading positions of ``logits[..., n]``."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}")
    n = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= n):
        raise IndexError(f"cross_entropy: target out of range for {n} classes")
    logp = _log_softmax(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    count = max(targets.size, 1)

    def _backward(g):
        grad = np.exp(logp)
        np.put_along_axis(
            grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1
        )
        return (grad * (g / count),)

    return _result(np.array(-np.sum(picked) / count), (logits,), _backward, "cross_entropy")
