"""Meta-information tokens (age, sex, height, weight by default).

Continuous fields are z-scored with training statistics and projected by a
per-field ``value * weight + bias``; categorical fields index a per-field
table.  A missing value selects the field's learned missing embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .. import tensor as T
from ..errors import ConfigError, DataError
from ..tensor import Tensor
from .config import MetaField, ModelConfig

MISSING_TOKENS = (None, "", "unknown")


@dataclass
class MetaBatch:
    """Numeric meta inputs for a batch: one (values, present) pair per field.

    For categorical fields ``values`` holds category indices.
    """

    values: dict[str, np.ndarray]
    present: dict[str, np.ndarray]

    @property
    def batch_size(self) -> int:
        return len(next(iter(self.present.values()))) if self.present else 0


def _is_missing(value) -> bool:
    if value in MISSING_TOKENS:
        return True
    return isinstance(value, float) and math.isnan(value)


def prepare_meta(metas: Sequence[Mapping | None], config: ModelConfig, stats=None) -> MetaBatch:
    """Turn raw per-record meta maps into a :class:`MetaBatch`.

    ``stats`` supplies ``zscore(name, value)`` for continuous fields; without
    it continuous values pass through unchanged.
    """
    fields = {f.name: f for f in config.meta_fields}
    values = {f.name: np.zeros(len(metas)) for f in config.meta_fields}
    present = {f.name: np.zeros(len(metas)) for f in config.meta_fields}
    for i, meta in enumerate(metas):
        for name, value in (meta or {}).items():
            field = fields.get(name)
            if field is None:
                raise ConfigError(f"unknown meta field {name!r}; configured: {sorted(fields)}")
            if _is_missing(value):
                continue
            present[name][i] = 1.0
            values[name][i] = _encode_value(field, value, stats)
    return MetaBatch(values, present)


def _encode_value(field: MetaField, value, stats) -> float:
    if field.kind == "categorical":
        try:
            return float(field.categories.index(str(value).lower()))
        except ValueError:
            raise DataError(f"meta field {field.name!r}: unknown category {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise DataError(f"meta field {field.name!r}: non-finite value")
    return stats.zscore(field.name, value) if stats is not None else value


def encode_meta(batch: MetaBatch, params: dict, config: ModelConfig) -> Tensor:
    """Return (B, M, embed_dim) meta tokens, one per configured field."""
    tokens = []
    for field in config.meta_fields:
        if field.name not in batch.present:
            raise ConfigError(f"meta batch lacks field {field.name!r}")
        prefix = f"meta.{field.name}"
        present = batch.present[field.name][:, None]
        if field.kind == "continuous":
            z = batch.values[field.name][:, None]
            encoded = Tensor(z) * params[f"{prefix}.weight"] + params[f"{prefix}.bias"]
        else:
            onehot = np.eye(len(field.categories))[batch.values[field.name].astype(np.int64)]
            encoded = T.matmul(Tensor(onehot), params[f"{prefix}.table"])
        token = encoded * Tensor(present) + Tensor(1.0 - present) * params[f"{prefix}.missing"]
        tokens.append(token.reshape(token.shape[0], 1, config.embed_dim))
    return T.concat(tokens, axis=1)


def meta_param_shapes(config: ModelConfig) -> dict[str, tuple]:
    d = config.embed_dim
    shapes = {}
    for field in config.meta_fields:
        prefix = f"meta.{field.name}"
        if field.kind == "continuous":
            shapes[f"{prefix}.weight"] = (d,)
            shapes[f"{prefix}.bias"] = (d,)
        else:
            shapes[f"{prefix}.table"] = (len(field.categories), d)
        shapes[f"{prefix}.missing"] = (d,)
    return shapes
