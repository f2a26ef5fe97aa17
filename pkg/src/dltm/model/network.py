"""Parameter construction and the end-to-end forward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import truncnorm

from .. import tensor as T
from ..tensor import Tensor
from .attention import (CROSS_LEAD, LEAD_INTERNAL, GroupPlan, block_param_shapes, make_groups,
                        transformer_block)
from .config import ModelConfig, TokenCoordinates
from .embed import embed_patches
from .meta import MetaBatch, encode_meta, meta_param_shapes

ModelParams = dict  # name -> Tensor, insertion-ordered


def ortho_prefixes(config: ModelConfig) -> list[str]:
    """Block prefixes of the stage that runs before the class token exists."""
    if config.ortho_attention:
        return [f"ortho.{i}.{mode}" for i in range(config.num_ortho_blocks)
                for mode in (LEAD_INTERNAL, CROSS_LEAD)]
    # ablation: twice as many full-attention blocks over the patch tokens
    return [f"patch_msa.{i}" for i in range(2 * config.num_ortho_blocks)]


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    d, h = config.embed_dim, config.hidden_dim
    shapes = {
        "patch.fine.weight": (config.fine_patch_len, d),
        "patch.fine.bias": (d,),
    }
    if config.dual_scale:
        shapes["patch.coarse.weight"] = (config.coarse_patch_len, d)
        shapes["patch.coarse.bias"] = (d,)
    if config.lead_separation:
        shapes["pos.lead"] = (config.num_leads, d)
    shapes["pos.time"] = (max(config.num_fine_steps, config.num_coarse_steps), d)
    shapes["pos.scale"] = (2 if config.dual_scale else 1, d)
    for prefix in ortho_prefixes(config):
        shapes.update(block_param_shapes(prefix, d, h))
    if config.use_meta:
        shapes.update(meta_param_shapes(config))
    for i in range(config.num_msa_blocks):
        shapes.update(block_param_shapes(f"msa.{i}", d, h))
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    shapes["head.weight"] = (d, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def _is_norm_weight(name: str) -> bool:
    return name.endswith("norm.weight") or name.endswith(("norm1.weight", "norm2.weight"))


def _is_zero_init(name: str) -> bool:
    last = name.rsplit(".", 1)[-1]
    return last in ("bias", "bq", "bk", "bv", "bo", "b1", "b2") and not name.startswith("meta.")


def init_params(config: ModelConfig, seed: int | np.random.Generator = 0) -> ModelParams:
    """Truncated-normal (±2 std) weights and tables, zero biases, unit norm gains.

    Meta projection biases are drawn like weights so that distinct fields
    start from distinct tokens.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if _is_norm_weight(name):
            data = np.ones(shape)
        elif _is_zero_init(name):
            data = np.zeros(shape)
        else:
            data = truncnorm.rvs(-2.0, 2.0, scale=config.init_std, size=shape, random_state=rng)
        params[name] = Tensor(np.asarray(data, dtype=np.float64).reshape(shape), requires_grad=True, name=name)
    return params


def param_count(params: ModelParams) -> int:
    return int(sum(p.size for p in params.values()))


@dataclass
class ForwardTrace:
    coords: TokenCoordinates
    patch_embeddings: Tensor
    patch_features: Tensor
    class_token: Tensor
    sequence: Tensor
    logits: Tensor


class GroupCache:
    """Partition plans per (config geometry, mode); built once per config."""

    def __init__(self):
        self._plans = {}

    def get(self, coords: TokenCoordinates, config: ModelConfig, mode: str) -> GroupPlan:
        key = (config.num_leads, config.num_fine_steps, config.num_coarse_steps,
               config.group_axis_convention, mode)
        plan = self._plans.get(key)
        if plan is None:
            plan = self._plans[key] = GroupPlan.build(
                make_groups(coords, mode, config.group_axis_convention), len(coords))
        return plan


_groups = GroupCache()


def forward(signal, meta: MetaBatch | None, params: ModelParams, config: ModelConfig,
            training: bool = False, rng: np.random.Generator | None = None,
            return_trace: bool = False):
    """Logits (B, num_classes) for a batch of windows (B, leads, samples).

    ``meta`` may be None to drop the meta tokens even when the parameters
    for them exist.  Dropout only runs with ``training=True`` and an ``rng``.
    """
    drop_rng = rng if training else None
    rate = config.dropout_rate
    x, coords = embed_patches(signal, params, config)
    embeddings = x
    for prefix in ortho_prefixes(config):
        groups = None
        if config.ortho_attention:
            groups = _groups.get(coords, config, prefix.rsplit(".", 1)[-1])
        x = transformer_block(x, params, prefix, config.num_heads, groups, config.norm_eps, rate, drop_rng)
    patch_features = x
    batch, _, dim = x.shape
    cls = T.mean(x, axis=1, keepdims=True)
    parts = [cls, x]
    if config.use_meta and meta is not None:
        parts.append(encode_meta(meta, params, config))
    seq = T.concat(parts, axis=1)
    sequence = seq
    for i in range(config.num_msa_blocks):
        seq = transformer_block(seq, params, f"msa.{i}", config.num_heads, None, config.norm_eps, rate, drop_rng)
    head_in = T.layer_norm(T.take(seq, 0, axis=1), params["norm.weight"], params["norm.bias"], config.norm_eps)
    logits = T.linear(head_in, params["head.weight"], params["head.bias"])
    if return_trace:
        return ForwardTrace(coords, embeddings, patch_features, cls.reshape(batch, dim), sequence, logits)
    return logits
