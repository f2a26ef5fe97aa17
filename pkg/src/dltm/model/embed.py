"""Dual-scale, lead-separated patch embedding."""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..errors import DataError, DimensionError
from ..tensor import Tensor
from .config import ModelConfig, TokenCoordinates, patch_coordinates


def max_pool_time(lead_signal, factor: int) -> np.ndarray:
    """Max over consecutive non-overlapping windows of ``factor`` samples."""
    x = np.asarray(lead_signal, dtype=np.float64)
    return T.max_lastdim_window(Tensor(x), factor).data


def _check_signal(signal: np.ndarray, config: ModelConfig) -> np.ndarray:
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim == 2:
        signal = signal[None]
    expected = (config.num_leads, config.window_samples)
    if signal.ndim != 3 or signal.shape[1:] != expected:
        raise DimensionError(f"signal shape {signal.shape} does not match (batch, {expected[0]}, {expected[1]})")
    if not np.isfinite(signal).all():
        raise DataError("signal contains non-finite samples")
    return signal


def _patchify(x: Tensor, config: ModelConfig, patch_len: int) -> Tensor:
    """(B, L, N) -> (B, tokens, patch_len) in the token order of the layout."""
    b, leads, n = x.shape
    if config.lead_separation:
        return x.reshape(b, leads * (n // patch_len), patch_len)
    unit = config.mixed_unit_samples
    steps = n // unit
    x = T.transpose(x.reshape(b, leads, steps, unit), (0, 2, 1, 3))
    return x.reshape(b, steps, leads * unit)


def positional_embedding(params: dict, coords: TokenCoordinates, config: ModelConfig) -> Tensor:
    pos = T.take(params["pos.time"], coords.time_index, axis=0)
    pos = pos + T.take(params["pos.scale"], coords.scale, axis=0)
    if config.lead_separation:
        pos = pos + T.take(params["pos.lead"], coords.lead_index, axis=0)
    return pos


def embed_patches(signal, params: dict, config: ModelConfig) -> tuple[Tensor, TokenCoordinates]:
    """Project every per-lead segment (and pooled segment) to a token.

    Returns embeddings of shape (B, num_patch_tokens, embed_dim); a 2-D
    signal is treated as a batch of one.
    """
    x = Tensor(_check_signal(signal, config))
    fine = _patchify(x, config, config.fine_patch_len if config.lead_separation else 0)
    tokens = T.linear(fine, params["patch.fine.weight"], params["patch.fine.bias"])
    if config.dual_scale:
        pooled = T.max_lastdim_window(x, config.coarse_pool_factor)
        coarse = _patchify(pooled, config, config.coarse_patch_len if config.lead_separation else 0)
        coarse = T.linear(coarse, params["patch.coarse.weight"], params["patch.coarse.bias"])
        tokens = T.concat([tokens, coarse], axis=1)
    coords = patch_coordinates(config)
    return tokens + positional_embedding(params, coords, config), coords
