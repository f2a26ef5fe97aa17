"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` whenever one of
their inputs requires a gradient.  ``Tape.backward`` replays the record in
reverse and writes ``.grad`` on the leaf tensors (tensors not produced by a
recorded op).  Without an active tape nothing is recorded, which is how
evaluation runs.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    ...     tape.backward(loss)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, NumericError

_node_ids = itertools.count()
_local = threading.local()
_backend = kernels.backend


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily route the row-wise kernels through backend ``name``."""
    global _backend
    previous = _backend
    try:
        _backend = kernels.BACKENDS[name]
    except KeyError:
        raise ContractError(f"unknown kernel backend {name!r}; available: {sorted(kernels.BACKENDS)}")
    try:
        yield
    finally:
        _backend = previous


def backend_name() -> str:
    return "cython" if _backend is kernels.BACKENDS.get("cython") else "numpy"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = requires_grad
        t.node_id = next(_node_ids)
        t.name = None
        return t

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}{label})"

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
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class _Record:
    op: str
    inputs: tuple
    output_id: int
    backward: Callable


@dataclass
class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    records: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def reset(self) -> None:
        self.records.clear()

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss`` on ``tape``."""
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {rec.output_id for rec in tape.records}
    pending = {loss.node_id: np.ones_like(loss.data)}
    if loss.node_id not in produced and loss.requires_grad:
        _accumulate_leaf(loss, pending.pop(loss.node_id))
        return
    for rec in reversed(tape.records):
        g = pending.pop(rec.output_id, None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            if inp.node_id in produced:
                prev = pending.get(inp.node_id)
                pending[inp.node_id] = gi if prev is None else prev + gi
            else:
                _accumulate_leaf(inp, gi)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        g = g.reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, inputs: Sequence, backward_fn: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    tape = active_tape()
    needs = tape is not None and any(isinstance(i, Tensor) and i.requires_grad for i in inputs)
    out = Tensor._wrap(data, requires_grad=needs)
    if needs:
        tape.records.append(_Record(op, tuple(inputs), out.node_id, backward_fn))
    return out


def record_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of a custom differentiable op.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    return _result(op, data, inputs, backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def _check_finite_input(op: str, x: np.ndarray) -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"{op} received non-finite input")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _result("add", data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    return _result("sub", data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return _result("mul", data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    rows = _rows(x.data)
    y = _backend.gelu_forward(rows).reshape(x.shape)

    def bw(g):
        return (_backend.gelu_backward(rows, _rows(g)).reshape(x.shape),)

    return _result("gelu", y, (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return x
    if not rate < 1.0:
        raise ContractError(f"dropout rate must be < 1, got {rate}")
    mask = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return dropout_mask_apply(x, mask)


def dropout_mask_apply(x: Tensor, mask: np.ndarray) -> Tensor:
    if mask.shape != x.shape:
        raise DimensionError(f"dropout mask shape {mask.shape} != input shape {x.shape}")
    return _result("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batching over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_shared_rhs(a, b)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result("matmul", data, (a, b), bw)


def _matmul_shared_rhs(a: Tensor, b: Tensor) -> Tensor:
    # one GEMM over flattened rows instead of a per-batch product and a sum
    lead = a.shape[:-1]
    rows = a.data.reshape(-1, a.shape[-1])
    data = (rows @ b.data).reshape(*lead, b.shape[-1])

    def bw(g):
        g2 = g.reshape(-1, b.shape[-1])
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = rows.T @ g2 if b.requires_grad else None
        return ga, gb

    return _result("matmul", data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result("sum", np.asarray(data), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result("mean", np.asarray(data), (a,), bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    _check_finite_input("softmax", x.data)
    y = _backend.softmax_forward(_rows(x.data)).reshape(x.shape)

    def bw(g):
        return (_backend.softmax_backward(_rows(y), _rows(g)).reshape(x.shape),)

    return _result("softmax", y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} != ({d},)")
    y, xhat, rstd = _backend.layer_norm_forward(_rows(x.data), gamma.data, beta.data, float(eps))

    def bw(g):
        gx, dgamma, dbeta = _backend.layer_norm_backward(_rows(g), xhat, rstd, gamma.data)
        return gx.reshape(x.shape), dgamma, dbeta

    return _result("layer_norm", y.reshape(x.shape), (x, gamma, beta), bw)


def max_lastdim_window(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping max pooling over the last axis."""
    n = x.shape[-1]
    if factor < 1 or n % factor:
        raise DimensionError(f"max pool: factor {factor} does not divide length {n}")
    y, arg = _backend.max_pool_forward(_rows(x.data), int(factor))
    out_shape = x.shape[:-1] + (n // factor,)

    def bw(g):
        return (_backend.max_pool_backward(_rows(g), arg, n).reshape(x.shape),)

    return _result("max_pool", y.reshape(out_shape), (x,), bw)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}")
    return _result("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result("transpose", np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inverse),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _result("swapaxes", np.swapaxes(a.data, i, j), (a,),
                   lambda g: (np.swapaxes(g, i, j),))


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Gather along ``axis``; the index array may have any shape."""
    index = np.asarray(index, dtype=np.int64)
    axis = axis % a.ndim
    data = np.take(a.data, index, axis=axis)
    unique = np.unique(index).size == index.size

    def bw(g):
        gx = np.zeros(a.shape)
        flat_idx = index.reshape(-1)
        g = g.reshape(a.shape[:axis] + (flat_idx.size,) + a.shape[axis + 1:])
        sel = (slice(None),) * axis + (flat_idx,)
        if unique:
            gx[sel] = g
        else:
            moved = np.moveaxis(gx, axis, 0)
            np.add.at(moved, flat_idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _result("take", data, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", data, tensors, bw)
