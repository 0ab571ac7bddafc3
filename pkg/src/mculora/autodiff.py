"""Dense float64 tensors with tape-based reverse-mode differentiation.

Values are computed eagerly on numpy arrays. While a :class:`Tape` is active
(used as a context manager), every primitive that touches a tracked tensor
appends a backward closure to the tape; :func:`gradients` then replays the
tape once, in reverse, accumulating vector-Jacobian products. Because ops are
recorded in creation order the tape is topologically sorted by construction.

Tensors are immutable once produced by an op. Forward/backward over a single
tape is single-threaded; independent tapes may run on independent threads.
With no tape active, the same functions run as plain (and cheaper) numpy
evaluation.

Everything is float64: the package's verification budget (finite-difference
gradient checks at 1e-5 relative error, analytic oracles at 1e-12) is not
reachable in single precision.
"""

from __future__ import annotations

import itertools
import threading
import warnings

import numpy as np

from .errors import ContractError, ShapeError

_ids = itertools.count(1)

#: Vectors with a norm at or below this are treated as degenerate by cosine ops.
NORM_EPS = 1e-12


class Tensor:
    """N-d float64 array participating in a differentiable computation."""

    __slots__ = ("data", "requires_grad", "grad", "_id", "_tracked")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._id = next(_ids)
        self._tracked = self.requires_grad

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:  # pragma: no cover - cosmetic
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value) -> Tensor:
    """Untracked tensor wrapping the given value."""
    return Tensor(value, requires_grad=False)


class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_tapes = _TapeStack()


class Tape:
    """Ordered record of primitive operations (inputs always precede use)."""

    def __init__(self):
        self.ops: list[tuple[int, object]] = []

    def __enter__(self) -> "Tape":
        _tapes.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tapes.stack.pop()
        if popped is not self:  # pragma: no cover - defensive
            raise ContractError("tape context exited out of order")

    def __len__(self) -> int:
        return len(self.ops)


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
    stack = _tapes.stack
    if not stack or not any(t._tracked for t in inputs):
        return
    out._tracked = True
    stack[-1].ops.append((out._id, backward))


def gradients(loss: Tensor, tape: Tape) -> dict[int, np.ndarray]:
    """Reverse-accumulate d(loss)/d(tensor) over the tape.

    Returns a map from tensor id to gradient for every requires_grad tensor
    that participated in the computation; those tensors also get their
    ``grad`` attribute (re)assigned. Tensors never touched by the tape are
    simply absent from the map.
    """
    if loss.size != 1:
        raise ContractError(f"gradients: loss must be scalar, got shape {loss.shape}")
    grad_map: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {}
    for out_id, backward in reversed(tape.ops):
        g = grad_map.get(out_id)
        if g is None:
            continue
        for tensor, contrib in backward(g):
            prev = grad_map.get(tensor._id)
            grad_map[tensor._id] = contrib if prev is None else prev + contrib
            holders[tensor._id] = tensor
    result: dict[int, np.ndarray] = {}
    for tid, tensor in holders.items():
        if tensor.requires_grad:
            tensor.grad = grad_map[tid]
            result[tid] = grad_map[tid]
    if loss.requires_grad:
        loss.grad = grad_map[loss._id]
        result[loss._id] = grad_map[loss._id]
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g over the axes numpy broadcast when producing it from `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    _record(out, (a, b), backward)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    _record(out, (a, b), backward)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    _record(out, (a,), lambda g: ((a, -g),))
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward(g):
        return ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape)))

    _record(out, (a, b), backward)
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ((a, ga), (b, gb))

    _record(out, (a, b), backward)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    _record(out, (a, b), backward)
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {a.shape}")
    out = Tensor(a.data.T)
    _record(out, (a,), lambda g: ((a, g.T),))
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    _record(out, (a,), lambda g: ((a, g.reshape(a.shape)),))
    return out


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.shape).copy()),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg, a.shape).copy()),)

    _record(out, (a,), backward)
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]

    def backward(g):
        if axis is None:
            return ((a, np.broadcast_to(g / count, a.shape).copy()),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg / count, a.shape).copy()),)

    _record(out, (a,), backward)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat of an empty sequence")
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(zip(ts, parts))

    _record(out, tuple(ts), backward)
    return out


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(a.data[index].copy())

    def backward(g):
        full = np.zeros(a.shape)
        full[index] = g
        return ((a, full),)

    _record(out, (a,), backward)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    _record(out, (a,), lambda g: ((a, g * out.data),))
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    _record(out, (a,), lambda g: ((a, g / a.data),))
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data))
    _record(out, (a,), lambda g: ((a, g / (2.0 * out.data)),))
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data))
    _record(out, (a,), lambda g: ((a, g * (1.0 - out.data * out.data)),))
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s)
    _record(out, (a,), lambda g: ((a, g * out.data * (1.0 - out.data)),))
    return out


def clip(a, low: float, high: float) -> Tensor:
    """Clamp values to [low, high]; gradient passes through the interior only."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, low, high))
    inside = ((a.data > low) & (a.data < high)).astype(np.float64)
    _record(out, (a,), lambda g: ((a, g * inside),))
    return out


def softmax(a, axis: int = -1) -> Tensor:
    """Row-stable softmax: positive entries summing to one along `axis`."""
    a = as_tensor(a)
    if a.size == 0:
        raise ContractError("softmax of an empty tensor")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return ((a, s * (g - dot)),)

    _record(out, (a,), backward)
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise ContractError("log_softmax of an empty tensor")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - lse)
    soft = np.exp(out.data)

    def backward(g):
        return ((a, g - soft * g.sum(axis=axis, keepdims=True)),)

    _record(out, (a,), backward)
    return out


def take_per_row(a, indices) -> Tensor:
    """out[i] = a[i, indices[i]] for a 2-D tensor."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"take_per_row expects a 2-D tensor, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"take_per_row: index length {idx.shape} does not match rows of {a.shape}")
    rows = np.arange(a.shape[0])
    out = Tensor(a.data[rows, idx])

    def backward(g):
        full = np.zeros(a.shape)
        full[rows, idx] = g
        return ((a, full),)

    _record(out, (a,), backward)
    return out


def dropout(a, p: float, rng) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    a = as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    mask = (rng.uniform(size=a.shape) >= p) / (1.0 - p)
    out = Tensor(a.data * mask)
    _record(out, (a,), lambda g: ((a, g * mask),))
    return out


# ---------------------------------------------------------------------------
# composite scalar/vector functions
# ---------------------------------------------------------------------------

def cosine_similarity(u, v) -> Tensor:
    """cos(u, v) for 1-D tensors, in [-1, 1].

    Near-zero-norm inputs (norm <= 1e-12) return a constant 0 instead of
    blowing up: adapter outputs start at exactly zero, so degenerate vectors
    occur legitimately early in training. A warning flags the case.
    """
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine_similarity expects equal-length vectors, got {u.shape} and {v.shape}")
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu <= NORM_EPS or nv <= NORM_EPS:
        warnings.warn("cosine_similarity: degenerate (near-zero) input, returning 0", stacklevel=2)
        return constant(0.0)
    num = tsum(mul(u, v))
    den = mul(sqrt(tsum(mul(u, u))), sqrt(tsum(mul(v, v))))
    return div(num, den)


def row_cosine(u, v) -> Tensor:
    """Row-wise cosine of two (B, d) tensors; degenerate rows contribute 0."""
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim == 1:
        u = reshape(u, (1, -1))
    if v.ndim == 1:
        v = reshape(v, (1, -1))
    if u.shape != v.shape or u.ndim != 2:
        raise ShapeError(f"row_cosine expects matching (B, d) tensors, got {u.shape} and {v.shape}")
    uu = tsum(mul(u, u), axis=1)
    vv = tsum(mul(v, v), axis=1)
    ok = constant(((uu.data > NORM_EPS * NORM_EPS) & (vv.data > NORM_EPS * NORM_EPS)).astype(np.float64))
    # degenerate rows are masked out of both numerator and denominator before
    # the sqrt so no gradient path ever divides by zero
    pad = constant(1.0 - ok.data)
    den = sqrt(mul(add(mul(uu, ok), pad), add(mul(vv, ok), pad)))
    num = mul(tsum(mul(u, v), axis=1), ok)
    return div(num, den)


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    """Raise ContractError if any entry is NaN/Inf; returns the tensor."""
    if not np.isfinite(t.data).all():
        raise ContractError(f"{what} contains non-finite values")
    return t
