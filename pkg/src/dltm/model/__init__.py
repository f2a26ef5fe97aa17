"""DLTM encoder: patch embedding, lead-orthogonal attention, meta fusion."""

from .attention import (CROSS_LEAD, LEAD_INTERNAL, GroupPlan, block_param_count, make_groups,
                        multi_head_attention, transformer_block)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DEFAULT_META_FIELDS, MetaField, ModelConfig, TokenCoordinates, patch_coordinates
from .embed import embed_patches, max_pool_time
from .meta import MetaBatch, encode_meta, prepare_meta
from .network import ForwardTrace, ModelParams, forward, init_params, param_count, param_shapes

__all__ = [
    "CROSS_LEAD", "LEAD_INTERNAL", "DEFAULT_META_FIELDS", "ForwardTrace", "GroupPlan", "MetaBatch",
    "MetaField", "ModelConfig", "ModelParams", "TokenCoordinates", "block_param_count", "embed_patches",
    "encode_meta", "forward", "init_params", "load_checkpoint", "make_groups", "max_pool_time",
    "multi_head_attention", "param_count", "param_shapes", "patch_coordinates", "prepare_meta",
    "save_checkpoint", "transformer_block",
]
