"""Dense linear algebra primitives and seeded randomness.

Matrices are plain float64 numpy arrays of shape (rows, cols). Every exported
operation returns finite values or raises; callers never see NaN/Inf.

Randomness comes from a SplitMix64 counter generator: output k of stream
`seed` is a pure function of (seed, k), so matrices are bit-identical across
platforms and independent of draw order. Gaussians are produced from counter
pairs via Box-Muller.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _finalize(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer over a uint64 array (wrapping arithmetic)."""
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def random_u64(seed: int, start: int, count: int) -> np.ndarray:
    """Words [start, start+count) of the SplitMix64 stream keyed by seed."""
    counters = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + counters * _GOLDEN
        return _finalize(state & _U64)


def derive_seed(seed: int, *parts: int) -> int:
    """Fold integer tags into seed, giving independent named substreams."""
    s = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        for p in parts:
            s = _finalize((s + _GOLDEN) ^ np.uint64(p & 0xFFFFFFFFFFFFFFFF))
    return int(s)


def seeded_gaussian(rows: int, cols: int, seed: int) -> np.ndarray:
    """Standard-normal (rows, cols) matrix, bit-identical for identical seeds.

    Each entry uses one counter pair via Box-Muller, so the value at a given
    index never depends on how many entries were drawn before it.
    """
    if rows < 1 or cols < 1:
        raise ConfigurationError(f"seeded_gaussian needs rows, cols >= 1, got ({rows}, {cols})")
    n = rows * cols
    words = random_u64(seed, 0, 2 * n)
    # 53-bit mantissa draws mapped into the open interval (0, 1)
    u1 = ((words[0::2] >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    u2 = ((words[1::2] >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return z.reshape(rows, cols)


def _as_matrix(x, name: str) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ConfigurationError(f"{name} must be a 2-D matrix, got ndim={m.ndim}")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with explicit shape checking."""
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ConfigurationError(
            f"matmul dimension mismatch: ({a.shape[0]}x{a.shape[1]}) @ ({b.shape[0]}x{b.shape[1]})"
        )
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise ValueError("matmul produced non-finite entries")
    return out


def row_softmax(m, mask=None) -> np.ndarray:
    """Row-wise softmax, numerically stabilized by per-row max subtraction.

    mask (True = keep) uses -inf semantics: masked logits are excluded from
    the row max and their weights are exactly 0. A fully masked row raises.
    """
    m = _as_matrix(m, "m")
    if not np.all(np.isfinite(m)):
        raise ValueError("row_softmax requires finite inputs")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != m.shape:
            raise ConfigurationError(
                f"mask shape {mask.shape} does not match matrix shape {m.shape}"
            )
        empty = ~mask.any(axis=1)
        if empty.any():
            row = int(np.flatnonzero(empty)[0])
            raise ValueError(f"row_softmax: row {row} is fully masked")
        scores = np.where(mask, m, -np.inf)
    else:
        scores = m
    row_max = scores.max(axis=1, keepdims=True)
    weights = np.exp(scores - row_max)
    return weights / weights.sum(axis=1, keepdims=True)


def l2_norm_rows(v) -> np.ndarray:
    """Per-row Euclidean norms, length v.rows."""
    v = _as_matrix(v, "v")
    if v.shape[0] == 0:
        raise ConfigurationError("l2_norm_rows requires a non-empty matrix")
    norms = np.sqrt((v * v).sum(axis=1))
    if not np.all(np.isfinite(norms)):
        raise ValueError("l2_norm_rows produced non-finite entries")
    return norms
