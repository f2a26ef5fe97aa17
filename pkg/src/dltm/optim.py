"""Loss, AdamW, SAM, EMA shadow weights and the warmup/plateau schedule.

Optimizers operate on a name -> Tensor mapping and rebind ``Tensor.data``
rather than writing into it, so arrays saved on a tape stay valid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ContractError, NumericError
from .tensor import Tape, Tensor, record_op

Grads = dict  # name -> ndarray


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy over every element, from raw logits."""
    y = np.asarray(targets, dtype=np.float64)
    z = logits.data
    if y.shape != z.shape:
        raise ContractError(f"bce_with_logits: logits {z.shape} vs targets {y.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ContractError("bce_with_logits: targets must be 0 or 1")
    losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def bw(g):
        sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return ((sig - y) * (g / n),)

    return record_op("bce_with_logits", np.asarray(losses.mean()), (logits,), bw)


def compute_grads(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor]) -> tuple[float, Grads]:
    """Run ``loss_fn`` on a fresh tape; return (loss, name -> gradient)."""
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    grads = {n: (np.zeros(p.shape) if p.grad is None else p.grad) for n, p in params.items()}
    for p in params.values():
        p.grad = None
    return loss.item(), grads


def global_norm(grads: Grads) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.05
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def step(self, params: Mapping[str, Tensor], grads: Grads, lr: float) -> None:
        for name, g in grads.items():
            if g.shape != params[name].shape:
                raise ContractError(f"gradient shape {g.shape} != parameter {name!r} shape {params[name].shape}")
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {name!r}; step refused")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            m = b1 * self.m.get(name, 0.0) + (1.0 - b1) * g
            v = b2 * self.v.get(name, 0.0) + (1.0 - b2) * (g * g)
            self.m[name], self.v[name] = m, v
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"optim.m/{n}": a for n, a in self.m.items()}
        out.update({f"optim.v/{n}": a for n, a in self.v.items()})
        return out

    def load_state(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        self.m = {k[len("optim.m/"):]: v for k, v in arrays.items() if k.startswith("optim.m/")}
        self.v = {k[len("optim.v/"):]: v for k, v in arrays.items() if k.startswith("optim.v/")}
        self.t = t


@dataclass
class SAM:
    """Sharpness-aware wrapper: gradient at the worst point of a rho-ball.

    One step evaluates the loss twice on the same batch: at ``p`` and at
    ``p + rho * g / ||g||`` (global norm), then applies the base step to the
    second gradient from the original ``p``.
    """

    rho: float = 0.05
    snapshot: dict | None = None
    last_perturbation_norm: float = 0.0

    def step(self, params: Mapping[str, Tensor], closure: Callable[[], tuple[float, Grads]],
             base_step: Callable[[Grads], None]) -> float:
        loss, grads = closure()
        norm = global_norm(grads)
        if norm == 0.0:
            self.last_perturbation_norm = 0.0
            base_step(grads)
            return loss
        if not math.isfinite(norm):
            raise NumericError("non-finite gradient norm in SAM first pass")
        scale = self.rho / norm
        self.snapshot = {n: p.data for n, p in params.items()}
        eps = {n: g * scale for n, g in grads.items()}
        self.last_perturbation_norm = global_norm(eps)
        try:
            for n, e in eps.items():
                params[n].data = params[n].data + e
            _, adv_grads = closure()
        finally:
            for n, p in params.items():
                p.data = self.snapshot[n]
            self.snapshot = None
        base_step(adv_grads)
        return loss


@dataclass
class EMA:
    alpha: float = 0.998
    shadow: dict = field(default_factory=dict)

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], alpha: float = 0.998) -> "EMA":
        return cls(alpha, {n: p.data.copy() for n, p in params.items()})

    def update(self, params: Mapping[str, Tensor]) -> None:
        a = self.alpha
        for n, p in params.items():
            if self.shadow[n].shape != p.shape:
                raise ContractError(f"EMA shadow {n!r} shape mismatch")
            self.shadow[n] = a * self.shadow[n] + (1.0 - a) * p.data

    def as_params(self) -> dict[str, Tensor]:
        return {n: Tensor(a, name=n) for n, a in self.shadow.items()}


def ema_update(shadow: dict, params: Mapping[str, Tensor], alpha: float) -> dict:
    ema = EMA(alpha, dict(shadow))
    ema.update(params)
    return ema.shadow


@dataclass
class WarmupPlateauSchedule:
    """Linear warmup to ``max_lr``, then halve on a stalled validation score.

    ``step(epoch, val_metric)`` returns the learning rate for ``epoch``;
    ``val_metric`` is the latest validation score (higher is better) and is
    ignored during warmup.
    """

    max_lr: float = 0.003
    warmup_epochs: int = 20
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-6
    threshold: float = 1e-4
    lr: float = 0.0
    best: float | None = None
    bad_epochs: int = 0

    def step(self, epoch: int, val_metric: float | None = None) -> float:
        if epoch < 0:
            raise ContractError(f"epoch must be non-negative, got {epoch}")
        if epoch < self.warmup_epochs:
            self.lr = self.max_lr * (epoch + 1) / self.warmup_epochs
            return self.lr
        if self.lr == 0.0:
            self.lr = self.max_lr
        if val_metric is not None:
            if self.best is None or val_metric > self.best + self.threshold:
                self.best = val_metric
                self.bad_epochs = 0
            else:
                self.bad_epochs += 1
                if self.bad_epochs > self.patience:
                    self.lr = max(self.lr * self.factor, self.min_lr)
                    self.bad_epochs = 0
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best, "bad_epochs": self.bad_epochs}

    def load_state(self, state: Mapping) -> None:
        self.lr, self.best, self.bad_epochs = state["lr"], state["best"], state["bad_epochs"]
