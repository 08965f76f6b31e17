"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape` when any
input requires a gradient. Outside a tape the same functions run as plain
forward computations, which is what finite-difference checks rely on.

    >>> w = Tensor([1.0, 2.0, 3.0], requires_grad=True, name="w")
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> backward(loss, tape)["w"]
    array([2., 4., 6.])
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericDomainError(ArithmeticError):
    """A forward computation produced (or was given) a non-finite value."""


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered log of differentiable operations, innermost-active per thread."""

    records: list = field(default_factory=list)

    def __post_init__(self):
        self._outputs: set = set()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def _push(self, record: _Record) -> None:
        self.records.append(record)
        self._outputs.add(id(record.output))


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def _emit(op: str, data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericDomainError(f"{op}: non-finite value in output")
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires_grad
    out.grad = None
    out.name = None
    tape = _active_tape()
    if requires_grad and tape is not None:
        tape._push(_Record(op, inputs, out, backward_fn))
    return out


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NumericDomainError(f"{op}: non-finite input")


# ---------------------------------------------------------------------------
# elementwise and structural ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    A, B = a.data, b.data

    def bw(g):
        return g @ B.T, A.T @ g

    return _emit("matmul", A @ B, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector broadcast over ``a``'s rows."""
    if a.shape == b.shape:
        return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim == 2 and a.shape[1] == b.shape[0]:
        return _emit("add", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: incompatible shapes {list(a.shape)} and {list(b.shape)}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    A, B = a.data, b.data
    return _emit("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _emit("gelu", y, (a,), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {list(a.shape)}")
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {list(old)} -> {list(shape)}") from e
    return _emit("reshape", y, (a,), lambda g: (g.reshape(old),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, size = a.shape, a.data.size
    return _emit(
        "mean", np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / size),)
    )


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table``; repeated ids accumulate their gradients."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range for table of {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("embedding", table.data[idx], (table,), bw)


def slice_(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit("slice", a.data[index].copy(), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[list(t.shape) for t in tensors]}") from e

    def bw(g):
        bounds = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", y, tensors, bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalisation with learned gain and bias."""
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(X.var(axis=-1, keepdims=True) + eps)
    xhat = (X - mu) * inv
    G = gain.data

    def bw(g):
        dxhat = g * G
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit("layer_norm", xhat * G + bias.data, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# softmax and losses


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax with max subtraction.

    ``mask`` (boolean, same shape) marks the admissible entries; the rest get
    probability exactly zero. Every row needs at least one admissible entry.
    """
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"softmax_rows: expected [n, k>=1], got {list(x.shape)}")
    _check_finite("softmax_rows", x.data)
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit("softmax_rows", y, (x,), bw)


def _token_weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ShapeError(f"weights: expected length {n}, got {list(w.shape)}")
    return w


def cross_entropy(logits: Tensor, targets: Sequence[int], weights=None) -> Tensor:
    """Token-averaged negative log-likelihood of ``targets`` under softmax(logits).

    With ``weights`` the per-token losses are combined as a weighted sum
    instead of a plain mean (used to pool several queries in one batch).
    """
    X = logits.data
    if X.ndim != 2:
        raise ShapeError(f"cross_entropy: expected [n, k], got {list(X.shape)}")
    n, k = X.shape
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} logit rows but {t.size} targets")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise IndexError(f"cross_entropy: target outside [0, {k})")
    _check_finite("cross_entropy", X)
    w = _token_weights(weights, n)
    m = X.max(axis=1, keepdims=True)
    e = np.exp(X - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    rows = np.arange(n)
    per_token = lse - X[rows, t]

    def bw(g):
        d = e / s
        d[rows, t] -= 1.0
        return (float(g) * w[:, None] * d,)

    return _emit("cross_entropy", np.asarray(w @ per_token), (logits,), bw)


def _sigmoid(s: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(s))
    return np.where(s >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logistic_loss(scores: Tensor, labels: Sequence[int], weights=None) -> Tensor:
    """Token-averaged binary logistic loss on raw scores (log-sum-exp form)."""
    S = scores.data
    if S.ndim != 1:
        raise ShapeError(f"logistic_loss: expected [n], got {list(S.shape)}")
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != S.shape:
        raise ShapeError(f"logistic_loss: {S.size} scores but {y.size} labels")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("logistic_loss: labels must be 0 or 1")
    _check_finite("logistic_loss", S)
    w = _token_weights(weights, S.size)
    per_token = np.maximum(S, 0.0) - S * y + np.log1p(np.exp(-np.abs(S)))

    def bw(g):
        return (float(g) * w * (_sigmoid(S) - y),)

    return _emit("logistic_loss", np.asarray(w @ per_token), (scores,), bw)


# ---------------------------------------------------------------------------
# reverse pass and gradient checking


def backward(loss: Tensor, tape: Tape) -> dict:
    """Run the reverse pass from a scalar ``loss`` over ``tape``.

    Every reached leaf tensor with ``requires_grad`` gets a fresh ``.grad``;
    the returned dict maps leaf names to those gradients.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward: loss must be a scalar, got shape {list(loss.shape)}")
    grads = {id(loss): np.ones(())}
    leaves: dict = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
            if key not in tape._outputs:
                leaves[key] = inp
    result = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
        if leaf.name is not None:
            result[leaf.name] = leaf.grad
    return result


def gradient_errors(
    build_loss: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    epsilon: float = 1e-5,
) -> dict:
    """Per-parameter worst relative error between analytic and central-difference gradients."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    with Tape() as tape:
        loss = build_loss(params)
    analytic = backward(loss, tape)
    errors = {}
    for name, p in params.items():
        a = analytic.get(name)
        if a is None:
            a = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = build_loss(params).item()
            flat[i] = orig - epsilon
            down = build_loss(params).item()
            flat[i] = orig
            f = (up - down) / (2 * epsilon)
            ai = a.reshape(-1)[i]
            worst = max(worst, abs(ai - f) / max(1e-8, abs(ai) + abs(f)))
        errors[name] = worst
    return errors


def grad_check(
    build_loss: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    epsilon: float = 1e-5,
) -> float:
    """Worst relative gradient error over every entry of every parameter."""
    return max(gradient_errors(build_loss, params, epsilon).values(), default=0.0)
