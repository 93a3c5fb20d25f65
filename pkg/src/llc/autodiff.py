"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations executed inside an active :class:`Tape` are recorded when at
least one input requires a gradient. Outside a tape, the same functions are
plain numpy computations, which is what evaluation code relies on.

Broadcasting is deliberately narrow: two operands of a binary elementwise
operation must have equal shapes, except that a ``1 x n`` row or an ``m x 1``
column may broadcast against an ``m x n`` matrix.
"""

from __future__ import annotations

import functools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from llc.errors import DomainError, ShapeError, StateError

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class Record:
    kind: str
    inputs: tuple
    output: "Tensor"
    backward: Callable


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations inside the block are recorded.
    After :meth:`backward` the tape is frozen until :meth:`reset`.
    """

    def __init__(self):
        self.records: list[Record] = []
        self.mode = "recording"

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, kind, inputs, output, backward_fn):
        if self.mode != "recording":
            raise StateError("tape is frozen; call reset() before recording again")
        self.records.append(Record(kind, tuple(inputs), output, backward_fn))

    def reset(self):
        self.records = []
        self.mode = "recording"

    def backward(self, loss: "Tensor"):
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.mode != "recording":
            raise StateError("tape is frozen; call reset() before a second backward")
        if loss.tape is not self:
            raise StateError("loss was not recorded on this tape")
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                inp.grad = gi if inp.grad is None else inp.grad + gi
        self.mode = "frozen"


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "tape", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = None
        self.name = name

    @classmethod
    def _wrap(cls, data):
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t.tape = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_const(self, -other)

    def __rsub__(self, other):
        return add_const(mul_const(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_const(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else mul_const(self, 1.0 / other)

    def __neg__(self):
        return mul_const(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(data, kind, inputs, backward_fn):
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.record(kind, inputs, out, backward_fn)
    return out


def backward(loss: Tensor):
    """Populate gradients of every trainable tensor that ``loss`` depends on."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise StateError("loss is not on a recording tape")
    loss.tape.backward(loss)


def zero_grad(params: Sequence[Tensor]):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return _result(A @ B, "matmul", (a, b), bw)


def spmm(matrix, x: Tensor) -> Tensor:
    """Product of a constant (sparse or dense) matrix with a tensor."""
    if x.ndim != 2 or matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm shape mismatch: {matrix.shape} @ {x.shape}")
    out = matrix @ x.data
    if sp.issparse(out):
        out = out.toarray()

    def bw(g):
        return (np.asarray(matrix.T @ g),)

    return _result(np.asarray(out, dtype=np.float64), "spmm", (x,), bw)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {x.shape}")
    return _result(x.data.T.copy(), "transpose", (x,), lambda g: (g.T,))


# ---------------------------------------------------------------- elementwise


def _check_broadcast(a, b, op):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sa) == 2 and len(sb) == 2:
        big, small = (sa, sb) if sa[0] * sa[1] >= sb[0] * sb[1] else (sb, sa)
        if small == (1, big[1]) or small == (big[0], 1):
            return
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not broadcast "
                     "(only 1 x n rows or m x 1 columns broadcast against m x n)")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    A, B = a.data, b.data
    return _result(A * B, "mul", (a, b),
                   lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    A, B = a.data, b.data
    if np.any(B == 0):
        raise DomainError("division by zero")
    out = A / B
    return _result(out, "div", (a, b),
                   lambda g: (_unbroadcast(g / B, A.shape),
                              _unbroadcast(-g * out / B, B.shape)))


def add_const(x: Tensor, c: float) -> Tensor:
    return _result(x.data + c, "add_const", (x,), lambda g: (g,))


def mul_const(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, "mul_const", (x,), lambda g: (g * c,))


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of ``x`` by the single value held in ``s``."""
    if s.size != 1:
        raise ShapeError(f"scale factor must hold one value, got shape {s.shape}")
    X, c = x.data, s.data.reshape(-1)[0]
    sshape = s.shape
    return _result(X * c, "scale", (x, s),
                   lambda g: (g * c, np.full(sshape, np.sum(g * X))))


def relu(x: Tensor) -> Tensor:
    X = x.data
    return _result(np.maximum(X, 0.0), "relu", (x,), lambda g: (g * (X > 0),))


def leaky_relu(x: Tensor, slope=0.2) -> Tensor:
    X = x.data
    out = np.where(X > 0, X, slope * X)
    return _result(out, "leaky_relu", (x,), lambda g: (g * np.where(X > 0, 1.0, slope),))


def elu(x: Tensor) -> Tensor:
    X = x.data
    neg = np.expm1(np.minimum(X, 0.0))
    out = np.where(X > 0, X, neg)
    return _result(out, "elu", (x,), lambda g: (g * np.where(X > 0, 1.0, neg + 1.0),))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _result(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, "tanh", (x,), lambda g: (g * (1.0 - out * out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    X = x.data
    if np.any(X <= 0):
        raise DomainError("log of a non-positive value")
    return _result(np.log(X), "log", (x,), lambda g: (g / X,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * mask, "dropout", (x,), lambda g: (g * mask,))


_ACTIVATIONS = {
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "elu": elu,
    "leaky_relu": leaky_relu,
    "identity": lambda x: x,
}


def activation(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


# ---------------------------------------------------------------- reductions


def _axis(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis=-1) -> Tensor:
    axis = _axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, "softmax", (x,), bw)


def log_softmax(x: Tensor, axis=-1) -> Tensor:
    axis = _axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, "log_softmax", (x,), bw)


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    return _result(np.array(x.data.sum()), "sum", (x,),
                   lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _result(np.array(x.data.mean()), "mean", (x,),
                   lambda g: (np.full(shape, float(g) / n),))


def concat(tensors: Sequence[Tensor], axis=0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    if len(tensors) == 1:
        return tensors[0]
    axis = _axis(tensors[0], axis)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[k] != ref[k] for k in range(len(ref)) if k != axis):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), "concat",
                   tuple(tensors), bw)


def slice_axis(x: Tensor, start: int, stop: int, axis=0) -> Tensor:
    axis = _axis(x, axis)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _result(x.data[index].copy(), "slice", (x,), bw)


def take(x: Tensor, i: int) -> Tensor:
    """Single entry of a 1-D tensor, as a 0-d tensor."""
    if x.ndim != 1:
        raise ShapeError(f"take expects a vector, got {x.shape}")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[i] = g
        return (full,)

    return _result(np.array(x.data[i]), "take", (x,), bw)


def gather(x: Tensor, index) -> Tensor:
    """Rows of ``x`` (entries, for a vector) at ``index``; repeats allowed."""
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def bw(g):
        if g.ndim == 1:
            return (np.bincount(index, weights=g, minlength=shape[0]),)
        scatter = sp.csr_matrix((np.ones(index.size), (index, np.arange(index.size))),
                                shape=(shape[0], index.size))
        return (np.asarray(scatter @ g.reshape(index.size, -1)).reshape(shape),)

    return _result(x.data[index], "gather", (x,), bw)


def stack_reduce(op: str, tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise ``sum``, ``mean`` or ``max`` across equally shaped tensors.

    ``max`` routes the gradient to the first input (in list order) that
    attains the maximum.
    """
    tensors = list(tensors)
    if not tensors:
        raise ValueError("stack_reduce of an empty list")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"stack_reduce: shape {t.shape} differs from {shape}")
    if len(tensors) == 1:
        return tensors[0]
    n = len(tensors)
    stacked = np.stack([t.data for t in tensors])
    if op == "sum":
        return _result(stacked.sum(axis=0), "stack_sum", tuple(tensors), lambda g: (g,) * n)
    if op == "mean":
        return _result(stacked.sum(axis=0) / n, "stack_mean", tuple(tensors),
                       lambda g: (g / n,) * n)
    if op == "max":
        winner = np.argmax(stacked, axis=0)

        def bw(g):
            return tuple(np.where(winner == k, g, 0.0) for k in range(n))

        return _result(stacked.max(axis=0), "stack_max", tuple(tensors), bw)
    raise ValueError(f"unknown reduction {op!r}")


# ---------------------------------------------------------------- segments


@functools.lru_cache(maxsize=64)
def _segment_plan(seg_bytes: bytes, n_segments: int):
    """Row order, segment starts and integer headroom for :func:`_segment_total`."""
    seg = np.frombuffer(seg_bytes, dtype=np.int64)
    order = np.argsort(seg, kind="stable")
    counts = np.bincount(seg, minlength=n_segments)
    filled = np.flatnonzero(counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])[filled]
    # each of c terms stays below 2**bits, so their sum fits in an int64
    bits = 62 - np.ceil(np.log2(counts[filled])).astype(np.int64)
    rank = np.repeat(np.arange(len(filled)), counts[filled])
    adder = sp.csr_matrix((np.ones(len(seg), np.int64), (rank, np.arange(len(seg)))),
                          shape=(len(filled), len(seg)))
    return order, filled, starts, rank, bits, adder


def _segment_total(values: np.ndarray, seg: np.ndarray, n_segments: int) -> np.ndarray:
    """Per-segment column sums that do not depend on the order of the rows.

    Every entry is placed on an integer grid whose spacing is a power of two
    chosen from the largest magnitude in its segment and column, and the
    integers are added exactly. The grid keeps about ``62 - log2(count)``
    bits below that largest magnitude, so the result is as accurate as an
    ordinary floating-point sum while being identical for any permutation of
    the rows. Non-finite input falls back to a plain sum.
    """
    width = int(np.prod(values.shape[1:]))
    V = values.reshape(len(seg), width)
    out = np.zeros((n_segments, width))
    if len(seg):
        order, filled, starts, rank, bits, adder = _segment_plan(
            np.ascontiguousarray(seg, dtype=np.int64).tobytes(), n_segments)
        rows = V[order]
        peak = np.maximum.reduceat(np.abs(rows), starts, axis=0)
        shift = bits[:, None] - np.frexp(peak)[1]
        if not np.isfinite(peak).all():
            out[filled] = np.add.reduceat(rows, starts, axis=0)
        else:
            # scaling by a power of two is exact; ldexp covers exponents
            # too large for a float64 scale factor
            if shift.max() < 1000:
                scaled = rows * np.exp2(shift.astype(np.float64))[rank]
            else:
                scaled = np.ldexp(rows, shift[rank])
            # truncation toward zero is as order-free as rounding and cheaper
            total = adder @ scaled.astype(np.int64)
            out[filled] = np.ldexp(total.astype(np.float64), -shift)
    return out.reshape((n_segments,) + values.shape[1:])


def segment_softmax(scores: Tensor, segments, n_segments: int) -> Tensor:
    """Softmax of ``scores`` (E x 1) within groups sharing a segment id."""
    seg = np.asarray(segments, dtype=np.int64)
    s = scores.data[:, 0]
    top = np.full(n_segments, -np.inf)
    np.maximum.at(top, seg, s)
    e = np.exp(s - top[seg])
    denom = _segment_total(e, seg, n_segments)
    out = (e / denom[seg])[:, None]

    def bw(g):
        dot = np.zeros(n_segments)
        np.add.at(dot, seg, (g * out)[:, 0])
        return (out * (g - dot[seg][:, None]),)

    return _result(out, "segment_softmax", (scores,), bw)


def segment_sum(values: Tensor, segments, n_segments: int) -> Tensor:
    """Sum rows of ``values`` into ``n_segments`` buckets, independently of row order."""
    seg = np.asarray(segments, dtype=np.int64)
    out = _segment_total(values.data, seg, n_segments)
    return _result(out, "segment_sum", (values,), lambda g: (g[seg],))


# ---------------------------------------------------------------- loss


def cross_entropy(logits: Tensor, labels, mask) -> Tensor:
    """Mean negative log-likelihood over the rows selected by ``mask``.

    ``mask`` is a boolean vector or an array of row indices.
    """
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("cross_entropy with an empty mask")
    n, c = logits.shape
    y = labels[rows]
    if np.any((y < 0) | (y >= c)):
        raise ValueError("label outside [0, n_classes)")
    z = logits.data[rows]
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(rows.size), y].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(rows.size), y] -= 1.0
        full = np.zeros((n, c))
        full[rows] = p * (float(g) / rows.size)
        return (full,)

    return _result(np.array(loss), "cross_entropy", (logits,), bw)


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
              state: AdamState | None = None, weight_decay=0.0) -> AdamState:
    """One bias-corrected Adam update; gradients are zeroed afterwards.

    Moments are keyed by position in ``params``, so the list order must stay
    fixed across calls sharing a state. ``weight_decay`` adds an L2 term to
    the gradient.
    """
    if state is None:
        state = AdamState()
    for p in params:
        if p.grad is None:
            raise StateError(f"parameter {p.name or ''} has no gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, p in enumerate(params):
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        m = beta1 * state.m.get(k, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(k, 0.0) + (1.0 - beta2) * g * g
        state.m[k], state.v[k] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad = np.zeros_like(p.data)
    return state


# ---------------------------------------------------------------- checking


def numerical_gradient(fn: Callable[[], Tensor], x: Tensor, step=1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``x``."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + step
        hi = fn().item()
        flat[k] = old - step
        lo = fn().item()
        flat[k] = old
        gflat[k] = (hi - lo) / (2 * step)
    return grad


def gradient_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step=1e-5) -> float:
    """Largest relative error between tape and finite-difference gradients.

    The error for each input is ``|analytic - numeric| / max(|analytic|, |numeric|)``
    in the Euclidean norm.
    """
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    worst = 0.0
    for x, a in zip(inputs, analytic):
        n = numerical_gradient(fn, x, step)
        scale_ = max(np.linalg.norm(a), np.linalg.norm(n), 1e-10)
        worst = max(worst, float(np.linalg.norm(a - n) / scale_))
    return worst
