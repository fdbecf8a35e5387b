"""
Tensor Core - minimal reverse-mode automatic differentiation
Every numeric primitive the model needs, computed on float64 numpy buffers.

Each operation records its parents and a backward closure. Node ids come from a
per-thread counter, so sorting a graph by descending id is a valid reverse
topological order for backward().
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import BoundsError, ContractError, NumericError, ShapeError

DTYPE = np.float64
LEAKY_SLOPE = 0.2
LN_EPS = 1e-5

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class _Tape(threading.local):
    """Per-thread recording state"""

    def __init__(self):
        self.counter = 0
        self.grad_enabled = True


_tape = _Tape()


def _next_node_id() -> int:
    _tape.counter += 1
    return _tape.counter


@contextmanager
def no_grad():
    """Run operations without recording them on the tape"""
    previous = _tape.grad_enabled
    _tape.grad_enabled = False
    try:
        yield
    finally:
        _tape.grad_enabled = previous


def is_grad_enabled() -> bool:
    return _tape.grad_enabled


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator (PCG64); all initialization and sampling draws from one of these"""
    return np.random.Generator(np.random.PCG64(seed))


class Tensor:
    """Dense float64 array with a gradient slot and a backward recipe"""

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id = _next_node_id()
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = _unbroadcast(grad, self.data.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=DTYPE)
        else:
            self.grad = self.grad + grad

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return neg(self)


class Parameter(Tensor):
    """Trainable tensor with Adam moment buffers"""

    def __init__(self, data: ArrayLike, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=DTYPE)
    out.grad = None
    out.node_id = _next_node_id()
    out.requires_grad = _tape.grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _graph(root: Tensor) -> List[Tensor]:
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda n: n.node_id, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """
    Propagate d(loss)/d(node) to every tensor reachable from loss

    Intermediate gradients are recomputed on each call; leaf gradients
    (parameters) accumulate across calls until zeroed.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires grad")
    order = _graph(loss)
    for node in order:
        if node._parents:
            node.grad = None
    seed = np.ones_like(loss.data)
    if loss._parents:
        loss.grad = seed
    else:
        loss._accumulate(seed)
    for node in order:
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if tensor.requires_grad:
        tensor._accumulate(grad)


# ---------------------------------------------------------------------------
# Element-wise arithmetic (numpy broadcasting)
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(grad):
        _accumulate(a, grad)
        _accumulate(b, grad)
    return _result(a.data + b.data, (a, b), _backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(grad):
        _accumulate(a, grad)
        _accumulate(b, -grad)
    return _result(a.data - b.data, (a, b), _backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(grad):
        _accumulate(a, grad * b.data)
        _accumulate(b, grad * a.data)
    return _result(a.data * b.data, (a, b), _backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(grad):
        _accumulate(a, grad / b.data)
        _accumulate(b, -grad * a.data / (b.data ** 2))
    return _result(a.data / b.data, (a, b), _backward)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda grad: _accumulate(a, -grad))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _result(out_data, (a,), lambda grad: _accumulate(a, grad * out_data))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda grad: _accumulate(a, grad / a.data))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda grad: _accumulate(a, grad * mask))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    """x if x >= 0 else slope * x"""
    mask = a.data >= 0
    factor = np.where(mask, 1.0, slope)
    return _result(a.data * factor, (a,), lambda grad: _accumulate(a, grad * factor))


def log_sigmoid_values(x: np.ndarray) -> np.ndarray:
    """log(sigmoid(x)) on plain arrays, without overflow for large |x|"""
    return -np.logaddexp(0.0, -x)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(log_sigmoid_values(x))


def sigmoid(a: Tensor) -> Tensor:
    out_data = _stable_sigmoid(a.data)
    return _result(out_data, (a,), lambda grad: _accumulate(a, grad * out_data * (1.0 - out_data)))


def log_sigmoid(a: Tensor) -> Tensor:
    out_data = log_sigmoid_values(a.data)
    return _result(out_data, (a,), lambda grad: _accumulate(a, grad * _stable_sigmoid(-a.data)))


# ---------------------------------------------------------------------------
# Linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[m x k] @ [k x n] -> [m x n]"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def _backward(grad):
        _accumulate(a, grad @ b.data.T)
        _accumulate(b, a.data.T @ grad)
    return _result(a.data @ b.data, (a, b), _backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
    return _result(a.data.T, (a,), lambda grad: _accumulate(a, grad.T))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = a.shape
    try:
        out_data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {original} as {shape}") from exc
    return _result(out_data, (a,), lambda grad: _accumulate(a, grad.reshape(original)))


def sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def _backward(grad):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        _accumulate(a, np.broadcast_to(grad, shape))
    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), _backward)


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along axis; the other extents must agree"""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat on axis {axis}: {tensors[0].shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward(grad):
        for t, start, stop in zip(tensors, bounds[:-1], bounds[1:]):
            index = [slice(None)] * ndim
            index[axis] = slice(start, stop)
            _accumulate(t, grad[tuple(index)])
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward)


def slice_along(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """a[start:stop] along axis; the range must be non-empty and within bounds"""
    extent = a.shape[axis]
    if not 0 <= start < stop <= extent:
        raise BoundsError(f"slice [{start}:{stop}] out of range for axis {axis} of extent {extent}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def _backward(grad):
        full = np.zeros(shape, dtype=DTYPE)
        full[index] = grad
        _accumulate(a, full)
    return _result(a.data[index], (a,), _backward)


def gather_rows(table: Tensor, indices: Sequence[int]) -> Tensor:
    """Rows of a 2-D table (embedding lookup)"""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise BoundsError(f"row index out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def _backward(grad):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, grad)
        _accumulate(table, full)
    return _result(table.data[idx], (table,), _backward)


# ---------------------------------------------------------------------------
# Normalization, attention weights, regularization, loss
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax with max-subtraction; entries where mask is False get exactly zero weight

    Args:
        x: Scores
        axis: Normalization axis
        mask: Optional boolean array broadcastable to x; every slice needs one True entry
    """
    scores = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
        if not mask.any(axis=axis).all():
            raise ContractError("softmax mask leaves an empty slice")
        scores = np.where(mask, scores, -np.inf)
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def _backward(grad):
        inner = (grad * out_data).sum(axis=axis, keepdims=True)
        _accumulate(x, out_data * (grad - inner))
    return _result(out_data, (x,), _backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply gain and bias"""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std

    def _backward(grad):
        _accumulate(bias, grad)
        _accumulate(gain, grad * x_hat)
        if x.requires_grad:
            d_hat = grad * gain.data
            dx = inv_std * (d_hat - d_hat.mean(axis=-1, keepdims=True)
                            - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True))
            x._accumulate(dx)
    return _result(x_hat * gain.data + bias.data, (x, gain, bias), _backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity outside training"""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets"""
    y = np.asarray(targets, dtype=DTYPE)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs targets {y.shape}")
    z = logits.data
    losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    count = float(z.size)

    def _backward(grad):
        _accumulate(logits, grad * (_stable_sigmoid(z) - y) / count)
    return _result(losses.mean(), (logits,), _backward)


def detach(x: Tensor) -> Tensor:
    return x.detach()


def one_hot(index: int, size: int) -> np.ndarray:
    vec = np.zeros(size, dtype=DTYPE)
    vec[index] = 1.0
    return vec


# ---------------------------------------------------------------------------
# Initialization and optimization
# ---------------------------------------------------------------------------

def uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9,
              beta2: float = 0.98, eps: float = 1e-9) -> None:
    """
    One bias-corrected Adam update; gradients are cleared afterwards

    Raises:
        ContractError: a parameter has no gradient
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name or '<unnamed>'} has no gradient")
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"parameter {p.name or '<unnamed>'} has a non-finite gradient")
    for p in params:
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * p.grad
        p.v = beta2 * p.v + (1.0 - beta2) * p.grad ** 2
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad = None
