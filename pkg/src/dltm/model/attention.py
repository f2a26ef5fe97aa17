"""Group multi-head self-attention and the pre-norm transformer block.

Group attention runs ordinary multi-head attention independently inside each
group of a token partition.  Groups of equal size are stacked into one
batched computation, so a partition of twelve 6-token groups costs a single
(B, 12, heads, 6, 6) score tensor.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..errors import ConfigError, ContractError
from ..tensor import Tensor
from .config import COARSE, TokenCoordinates

LEAD_INTERNAL, CROSS_LEAD = "lead_internal", "cross_lead"


def make_groups(coords: TokenCoordinates, mode: str, convention: str = "figure_intuitive") -> list[np.ndarray]:
    """Partition patch tokens for one lead-orthogonal sub-block.

    Under ``figure_intuitive`` the lead-internal mode groups each lead's
    tokens (fine and coarse) together and the cross-lead mode groups the fine
    tokens sharing a time step, plus the coarse tokens sharing a coarse step.
    ``paper_text`` swaps which mode name gets which grouping.
    """
    if mode not in (LEAD_INTERNAL, CROSS_LEAD):
        raise ConfigError(f"unknown grouping mode {mode!r}")
    if convention not in ("figure_intuitive", "paper_text"):
        raise ConfigError(f"unknown group convention {convention!r}")
    by_lead = (mode == LEAD_INTERNAL) == (convention == "figure_intuitive")
    if by_lead and (coords.lead_index < 0).any():
        raise ContractError("lead grouping needs a lead index on every token")
    keys = (coords.lead_index.tolist() if by_lead
            else list(zip(coords.scale.tolist(), coords.time_index.tolist())))
    groups: dict = {}
    for i, key in enumerate(keys):
        groups.setdefault(key, []).append(i)
    return [np.array(g, dtype=np.int64) for g in groups.values()]


def lead_groups(coords: TokenCoordinates) -> list[np.ndarray]:
    return make_groups(coords, LEAD_INTERNAL, "figure_intuitive")


def time_groups(coords: TokenCoordinates) -> list[np.ndarray]:
    return make_groups(coords, CROSS_LEAD, "figure_intuitive")


@dataclass
class GroupPlan:
    """Equal-size buckets of a partition and the permutation that undoes them."""

    buckets: list[np.ndarray]  # each (num_groups, group_size)
    inverse: np.ndarray | None  # None when the bucket order is the identity

    @classmethod
    def build(cls, groups, num_tokens: int) -> "GroupPlan":
        flat = np.concatenate([np.asarray(g, dtype=np.int64) for g in groups]) if groups else np.zeros(0, np.int64)
        if flat.size != num_tokens or not np.array_equal(np.sort(flat), np.arange(num_tokens)):
            raise ContractError(f"groups do not partition 0..{num_tokens - 1}")
        by_size = defaultdict(list)
        for g in groups:
            by_size[len(g)].append(np.asarray(g, dtype=np.int64))
        buckets = [np.stack(gs) for _, gs in sorted(by_size.items())]
        order = np.concatenate([b.reshape(-1) for b in buckets])
        inverse = None if np.array_equal(order, np.arange(num_tokens)) else np.argsort(order)
        return cls(buckets, inverse)


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    *lead, s, d = x.shape
    x = x.reshape(*lead, s, num_heads, d // num_heads)
    n = x.ndim
    return T.transpose(x, tuple(range(n - 3)) + (n - 2, n - 3, n - 1))


def _merge_heads(x: Tensor) -> Tensor:
    n = x.ndim
    x = T.transpose(x, tuple(range(n - 3)) + (n - 2, n - 3, n - 1))
    *lead, s, h, dh = x.shape
    return x.reshape(*lead, s, h * dh)


def _attend(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    qh, kh, vh = (_split_heads(t, num_heads) for t in (q, k, v))
    scores = T.scale(T.matmul(qh, T.swapaxes(kh, -1, -2)), 1.0 / math.sqrt(qh.shape[-1]))
    return _merge_heads(T.matmul(T.softmax_lastdim(scores), vh))


def multi_head_attention(x: Tensor, params: dict, prefix: str, num_heads: int,
                         groups=None) -> Tensor:
    """Multi-head self-attention over ``x`` (B, T, D), restricted to ``groups``.

    ``groups=None`` means one group holding every token (vanilla attention).
    """
    p = lambda n: params[f"{prefix}.{n}"]
    q = T.linear(x, p("wq"), p("bq"))
    k = T.linear(x, p("wk"), p("bk"))
    v = T.linear(x, p("wv"), p("bv"))
    if groups is None:
        y = _attend(q, k, v, num_heads)
    else:
        plan = groups if isinstance(groups, GroupPlan) else GroupPlan.build(groups, x.shape[-2])
        batch = x.shape[0]
        pieces = []
        for idx in plan.buckets:
            qb, kb, vb = (T.take(t, idx, axis=1) for t in (q, k, v))
            out = _attend(qb, kb, vb, num_heads)
            pieces.append(out.reshape(batch, idx.size, x.shape[-1]))
        y = pieces[0] if len(pieces) == 1 else T.concat(pieces, axis=1)
        if plan.inverse is not None:
            y = T.take(y, plan.inverse, axis=1)
    return T.linear(y, p("wo"), p("bo"))


def transformer_block(x: Tensor, params: dict, prefix: str, num_heads: int, groups=None,
                      eps: float = 1e-5, dropout_rate: float = 0.0, rng=None) -> Tensor:
    """Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x)) with a GELU FFN."""
    p = lambda n: params[f"{prefix}.{n}"]
    h = T.layer_norm(x, p("norm1.weight"), p("norm1.bias"), eps)
    x = x + T.dropout(multi_head_attention(h, params, f"{prefix}.attn", num_heads, groups), dropout_rate, rng)
    h = T.layer_norm(x, p("norm2.weight"), p("norm2.bias"), eps)
    h = T.linear(T.gelu(T.linear(h, p("ffn.w1"), p("ffn.b1"))), p("ffn.w2"), p("ffn.b2"))
    return x + T.dropout(h, dropout_rate, rng)


def block_param_shapes(prefix: str, dim: int, hidden: int) -> dict[str, tuple]:
    shapes = {f"{prefix}.norm1.weight": (dim,), f"{prefix}.norm1.bias": (dim,)}
    for n in ("q", "k", "v", "o"):
        shapes[f"{prefix}.attn.w{n}"] = (dim, dim)
        shapes[f"{prefix}.attn.b{n}"] = (dim,)
    shapes.update({
        f"{prefix}.norm2.weight": (dim,), f"{prefix}.norm2.bias": (dim,),
        f"{prefix}.ffn.w1": (dim, hidden), f"{prefix}.ffn.b1": (hidden,),
        f"{prefix}.ffn.w2": (hidden, dim), f"{prefix}.ffn.b2": (dim,),
    })
    return shapes


def block_param_count(dim: int, hidden: int) -> int:
    """Closed form: 4 projections with biases, a two-layer FFN, two norms."""
    return 4 * dim * dim + 4 * dim + 2 * dim * hidden + hidden + dim + 4 * dim
