"""Central finite-difference checks for taped gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def relative_error(analytic, numeric, floor: float = 1e-12) -> float:
    a, n = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def analytic_grads(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    return [np.zeros(t.shape) if t.grad is None else t.grad for t in tensors]


def _eval(loss_fn) -> float:
    return loss_fn().item()


def numeric_grad(loss_fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. entries of ``t`` (all, or ``coords``)."""
    base = t.data
    flat_coords = range(base.size) if coords is None else coords
    out = np.zeros(base.size)
    for i in flat_coords:
        bumped = base.copy().reshape(-1)
        bumped[i] += h
        t.data = bumped.reshape(base.shape)
        up = _eval(loss_fn)
        bumped[i] -= 2 * h
        t.data = bumped.reshape(base.shape)
        down = _eval(loss_fn)
        out[i] = (up - down) / (2 * h)
    t.data = base
    return out.reshape(base.shape)


def directional_derivative(loss_fn, t: Tensor, direction: np.ndarray, h: float = 1e-5) -> float:
    base = t.data
    t.data = base + h * direction
    up = _eval(loss_fn)
    t.data = base - h * direction
    down = _eval(loss_fn)
    t.data = base
    return (up - down) / (2 * h)


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5,
                    seed: int = 0) -> float:
    """Max relative error over every input entry of ``fn`` (small inputs only).

    Non-scalar outputs are reduced with fixed random weights so that every
    output element contributes to the checked loss.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    probe = fn(*[Tensor(a) for a in arrays])
    weights = Tensor(np.random.default_rng(seed).normal(size=probe.shape))

    def loss_fn():
        return (fn(*tensors) * weights).sum()

    grads = analytic_grads(loss_fn, tensors)
    worst = 0.0
    for t, g in zip(tensors, grads):
        worst = max(worst, relative_error(g, numeric_grad(loss_fn, t, h), floor=1e-7))
    return worst
