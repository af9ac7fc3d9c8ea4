"""Boolean attention-sparsity masks over a video token layout.

A layout splits the flat sequence into [text prefix | T frames x P patches |
text suffix]. Masks are (n, n) bool arrays, True = attention allowed, always
a subset of the causal lower triangle with the diagonal forced on.

Video-token sparsity rules (query q, key k, both video, intersected k <= q):

    dense            everything
    local(w)         q - k < w
    atrous(s)        (q - k) % s == 0
    spatial          key in first frame, or key in the query's frame
    temporal         key in first frame, or same patch in the previous frame,
                     or k == q
    spatial_temporal union of spatial and temporal

Text tokens attend causally to everything, and every token may attend to the
text prefix: question/instruction text keeps full context, only video-video
links are sparsified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

PATTERN_KINDS = ("dense", "local", "atrous", "spatial", "temporal", "spatial_temporal")


@dataclass(frozen=True)
class TokenLayout:
    """Decomposition of a flat token sequence into text and frame/patch grid."""

    text_prefix_len: int
    num_frames: int
    patches_per_frame: int
    text_suffix_len: int

    def __post_init__(self):
        for name in ("text_prefix_len", "num_frames", "patches_per_frame", "text_suffix_len"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"layout.{name} must be non-negative")
        if self.num_frames > 0 and self.patches_per_frame == 0:
            raise ConfigurationError("layout with frames needs patches_per_frame >= 1")
        if self.total_len < 1:
            raise ConfigurationError("layout must describe at least one token")

    @property
    def video_len(self) -> int:
        return self.num_frames * self.patches_per_frame

    @property
    def total_len(self) -> int:
        return self.text_prefix_len + self.video_len + self.text_suffix_len

    def is_video(self, pos: int) -> bool:
        return self.text_prefix_len <= pos < self.text_prefix_len + self.video_len

    def frame_of(self, pos: int) -> int:
        if not self.is_video(pos):
            raise ValueError(f"position {pos} is not a video token")
        return (pos - self.text_prefix_len) // self.patches_per_frame

    def patch_of(self, pos: int) -> int:
        if not self.is_video(pos):
            raise ValueError(f"position {pos} is not a video token")
        return (pos - self.text_prefix_len) % self.patches_per_frame


@dataclass(frozen=True)
class SparsityPattern:
    """Declarative sparsity pattern; window/stride only apply to local/atrous."""

    kind: str
    window: int | None = None
    stride: int | None = None

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise ConfigurationError(
                f"unknown pattern kind {self.kind!r}, expected one of {PATTERN_KINDS}"
            )
        if self.kind == "local":
            if self.window is None or self.window < 1:
                raise ConfigurationError("local pattern needs window >= 1")
        elif self.kind == "atrous":
            if self.stride is None or self.stride < 2:
                raise ConfigurationError("atrous pattern needs stride >= 2")

    @classmethod
    def dense(cls) -> "SparsityPattern":
        return cls("dense")

    @classmethod
    def local(cls, window: int) -> "SparsityPattern":
        return cls("local", window=window)

    @classmethod
    def atrous(cls, stride: int) -> "SparsityPattern":
        return cls("atrous", stride=stride)

    @classmethod
    def spatial(cls) -> "SparsityPattern":
        return cls("spatial")

    @classmethod
    def temporal(cls) -> "SparsityPattern":
        return cls("temporal")

    @classmethod
    def spatial_temporal(cls) -> "SparsityPattern":
        return cls("spatial_temporal")

    def describe(self) -> str:
        if self.kind == "local":
            return f"local:{self.window}"
        if self.kind == "atrous":
            return f"atrous:{self.stride}"
        return self.kind


def parse_pattern(text: str, layout: TokenLayout | None = None) -> SparsityPattern:
    """Parse 'kind' or 'kind:param' CLI/config syntax.

    Defaults when the parameter is omitted: local window = one frame of
    tokens, atrous stride = 2.
    """
    name, _, param = text.partition(":")
    name = name.strip()
    if name not in PATTERN_KINDS:
        raise ConfigurationError(
            f"unknown pattern {text!r}, expected one of {PATTERN_KINDS}"
        )
    if name == "local":
        if param:
            window = _parse_param(text, param)
        elif layout is not None and layout.patches_per_frame > 0:
            window = layout.patches_per_frame
        else:
            raise ConfigurationError(f"pattern {text!r} needs an explicit window")
        return SparsityPattern.local(window)
    if name == "atrous":
        stride = _parse_param(text, param) if param else 2
        return SparsityPattern.atrous(stride)
    if param:
        raise ConfigurationError(f"pattern {name!r} takes no parameter, got {text!r}")
    return SparsityPattern(name)


def _parse_param(text: str, param: str) -> int:
    try:
        return int(param)
    except ValueError:
        raise ConfigurationError(f"bad pattern parameter in {text!r}") from None


def _video_rule(pattern: SparsityPattern, q: np.ndarray, k: np.ndarray,
                fq: np.ndarray, fk: np.ndarray, pq: np.ndarray, pk: np.ndarray) -> np.ndarray:
    if pattern.kind == "dense":
        return np.ones(q.shape, dtype=bool)
    if pattern.kind == "local":
        return (q - k) < pattern.window
    if pattern.kind == "atrous":
        return ((q - k) % pattern.stride) == 0
    if pattern.kind == "spatial":
        return (fk == 0) | (fk == fq)
    if pattern.kind == "temporal":
        return (fk == 0) | ((fk == fq - 1) & (pk == pq)) | (k == q)
    # spatial_temporal: union of the two rules
    spatial = (fk == 0) | (fk == fq)
    temporal = (fk == 0) | ((fk == fq - 1) & (pk == pq)) | (k == q)
    return spatial | temporal


def build_mask(layout: TokenLayout, pattern: SparsityPattern) -> np.ndarray:
    """Realize a pattern over a layout as an (n, n) bool matrix."""
    n = layout.total_len
    pos = np.arange(n)
    video = (pos >= layout.text_prefix_len) & (pos < layout.text_prefix_len + layout.video_len)
    P = max(layout.patches_per_frame, 1)
    frame = np.where(video, (pos - layout.text_prefix_len) // P, -1)
    patch = np.where(video, (pos - layout.text_prefix_len) % P, -1)

    q = pos[:, None]
    k = pos[None, :]
    causal = k <= q
    rule = _video_rule(pattern, q, k, frame[:, None], frame[None, :],
                       patch[:, None], patch[None, :])
    # Video queries: text-prefix keys, pattern-allowed video keys, and self.
    video_row = (k < layout.text_prefix_len) | (video[None, :] & rule) | (k == q)
    allowed = causal & np.where(video[:, None], video_row, True)
    return allowed


def mask_density(mask: np.ndarray) -> float:
    """Allowed-pair count over the full causal count n(n+1)/2."""
    mask = np.asarray(mask, dtype=bool)
    n = mask.shape[0]
    if n == 0:
        raise ConfigurationError("mask_density requires a non-empty mask")
    return float(int(mask.sum()) / (n * (n + 1) / 2))


def mask_to_text(mask: np.ndarray) -> str:
    """Render as rows of 0/1 for goldens and the CLI."""
    mask = np.asarray(mask, dtype=bool)
    return "\n".join("".join("1" if b else "0" for b in row) for row in mask)
