"""Scaled dot-product attention: dense causal, masked, and streaming.

dense_causal and masked materialize the full weight matrix and return it
alongside the output. streaming_masked processes keys in fixed-size tiles
with a running max and running normalizer, never holds more than one tile of
scores, and returns the output only: callers above it structurally cannot
read attention weights.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .numerics import row_softmax

DEFAULT_TILE = 16


def _check_inputs(q, k, v):
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ConfigurationError("attention inputs must be 2-D matrices")
    if q.shape[1] != k.shape[1]:
        raise ConfigurationError(
            f"query dim {q.shape[1]} does not match key dim {k.shape[1]}"
        )
    if k.shape[0] != v.shape[0]:
        raise ConfigurationError(
            f"key rows {k.shape[0]} do not match value rows {v.shape[0]}"
        )
    return q, k, v


def dense_causal(q, k, v) -> tuple[np.ndarray, np.ndarray]:
    """Causal attention with the mask aligned to the right edge.

    Query row i stands at absolute position l_k - l_q + i, so decode-time
    queries (l_q < l_k) attend to the whole cache. Returns (out, weights).
    """
    q, k, v = _check_inputs(q, k, v)
    l_q, l_k = q.shape[0], k.shape[0]
    if l_q > l_k:
        raise ConfigurationError(f"dense_causal requires l_q <= l_k, got {l_q} > {l_k}")
    offset = l_k - l_q
    mask = np.arange(l_k)[None, :] <= (np.arange(l_q)[:, None] + offset)
    return masked(q, k, v, mask)


def masked(q, k, v, mask) -> tuple[np.ndarray, np.ndarray]:
    """Attention restricted to mask (True = allowed). Returns (out, weights).

    Masked weights are exactly zero; each allowed row renormalizes to 1.
    """
    q, k, v = _check_inputs(q, k, v)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (q.shape[0], k.shape[0]):
        raise ConfigurationError(
            f"mask shape {mask.shape} does not match (l_q, l_k)=({q.shape[0]}, {k.shape[0]})"
        )
    scale = 1.0 / np.sqrt(q.shape[1])
    weights = row_softmax(q @ k.T * scale, mask)
    return weights @ v, weights


def streaming_masked(q, k, v, mask, tile_size: int = DEFAULT_TILE) -> np.ndarray:
    """Tiled online-softmax attention; the weight matrix is never built.

    Keys are consumed in tiles of tile_size. Per query row we carry the
    running max m, running normalizer s, and the weighted value accumulator;
    finished tiles are rescaled by exp(m_old - m_new) when the max moves.
    """
    q, k, v = _check_inputs(q, k, v)
    mask = np.asarray(mask, dtype=bool)
    l_q, l_k = q.shape[0], k.shape[0]
    if mask.shape != (l_q, l_k):
        raise ConfigurationError(
            f"mask shape {mask.shape} does not match (l_q, l_k)=({l_q}, {l_k})"
        )
    if tile_size < 1:
        raise ConfigurationError(f"tile_size must be >= 1, got {tile_size}")
    empty = ~mask.any(axis=1)
    if empty.any():
        row = int(np.flatnonzero(empty)[0])
        raise ValueError(f"streaming_masked: row {row} is fully masked")

    scale = 1.0 / np.sqrt(q.shape[1])
    m = np.full(l_q, -np.inf)
    s = np.zeros(l_q)
    acc = np.zeros((l_q, v.shape[1]))
    for start in range(0, l_k, tile_size):
        stop = min(start + tile_size, l_k)
        scores = q @ k[start:stop].T * scale
        scores = np.where(mask[:, start:stop], scores, -np.inf)
        tile_max = scores.max(axis=1)
        new_m = np.maximum(m, tile_max)
        # Rows with nothing allowed yet have max -inf; substituting 0 keeps
        # every subtraction away from -inf - -inf while exp still yields 0.
        safe_max = np.where(np.isfinite(new_m), new_m, 0.0)
        correction = np.exp(m - safe_max)
        weights = np.exp(scores - safe_max[:, None])
        s = s * correction + weights.sum(axis=1)
        acc = acc * correction[:, None] + weights @ v[start:stop]
        m = new_m
    return acc / s[:, None]
