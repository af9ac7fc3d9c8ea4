"""Desk-scale causal transformer with grouped-query attention and the
cross-layer cache-compression pipeline.

Layer wiring during prefill, for estimation layer index e = clie_layer_index
and sparsity start s = st_layer_index (config requires s > e):

    layers 0..e      masked attention (weights materialized); each layer's
                     recent-window accumulator is recorded and the weights
                     are then discarded
    layers e+1..L-1  streaming attention only; no weight matrix ever exists
    layers 0..s-1    dense causal mask
    layers s..L-1    the configured sparsity pattern's mask

Compression runs once after prefill: layers at or below e are scored with
their own accumulator, layers above reuse layer e's accumulator, both
weighted by the layer's own value-row norms. Decode is single-query
streaming attention over the retained rows at every layer.

Positions enter only through causal masking; there is no rotary or learned
positional encoding, and embeddings are supplied by the caller. The block is
pre-norm with a two-layer ReLU MLP.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention
from .cache import (
    ImportanceState,
    KvCacheLayer,
    PolicyConfig,
    accumulate_recent_attention,
    baseline_h2o_score,
    baseline_streaming,
    budget_to_wh,
    evict,
    select_retained,
)
from .errors import ConfigurationError
from .masks import SparsityPattern, TokenLayout, build_mask
from .numerics import derive_seed, l2_norm_rows, seeded_gaussian
from .stats import permutation_pvalue, spearman_rho

_FF_MULT = 2
_NORM_EPS = 1e-12
_WEIGHT_TAG = 11
_VOCAB_TAG = 13


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    d_model: int
    num_q_heads: int
    num_kv_heads: int
    d_k: int
    d_v: int
    vocab_size: int
    seed: int

    def __post_init__(self):
        for name in ("num_layers", "d_model", "num_q_heads", "num_kv_heads",
                     "d_k", "d_v", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"model.{name} must be >= 1")
        if self.num_q_heads % self.num_kv_heads != 0:
            raise ConfigurationError(
                f"num_q_heads ({self.num_q_heads}) must be divisible by "
                f"num_kv_heads ({self.num_kv_heads})"
            )
        if self.d_model != self.num_q_heads * self.d_k:
            raise ConfigurationError(
                f"d_model ({self.d_model}) must equal num_q_heads * d_k "
                f"({self.num_q_heads} * {self.d_k})"
            )

    @property
    def group_size(self) -> int:
        return self.num_q_heads // self.num_kv_heads

    def kv_group(self, q_head: int) -> int:
        return q_head // self.group_size


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass(frozen=True)
class Model:
    """Immutable after init; safe to share across concurrent sessions."""

    config: ModelConfig
    layers: tuple[LayerWeights, ...]
    w_vocab: np.ndarray


def init_model(config: ModelConfig) -> Model:
    """Draw all projection weights from the seeded counter stream."""
    c = config
    scale = 1.0 / np.sqrt(c.d_model)
    d_ff = _FF_MULT * c.d_model

    def draw(rows, cols, *tags):
        return seeded_gaussian(rows, cols, derive_seed(c.seed, _WEIGHT_TAG, *tags)) * scale

    layers = []
    for layer in range(c.num_layers):
        layers.append(LayerWeights(
            wq=draw(c.d_model, c.num_q_heads * c.d_k, layer, 0),
            wk=draw(c.d_model, c.num_kv_heads * c.d_k, layer, 1),
            wv=draw(c.d_model, c.num_kv_heads * c.d_v, layer, 2),
            wo=draw(c.num_q_heads * c.d_v, c.d_model, layer, 3),
            w_up=draw(c.d_model, d_ff, layer, 4),
            w_down=draw(d_ff, c.d_model, layer, 5),
        ))
    w_vocab = seeded_gaussian(c.d_model, c.vocab_size, derive_seed(c.seed, _VOCAB_TAG)) * scale
    return Model(config=c, layers=tuple(layers), w_vocab=w_vocab)


@dataclass
class SessionState:
    layout: TokenLayout
    policy: PolicyConfig
    pattern: SparsityPattern
    tile_size: int = attention.DEFAULT_TILE
    cache: list[KvCacheLayer] = field(default_factory=list)
    importance: list[ImportanceState | None] = field(default_factory=list)
    retained: list[list[np.ndarray]] | None = None
    prefill_embeddings: np.ndarray | None = None
    prefill_len: int = 0
    w: int = 0
    h: int = 0
    compressed: bool = False
    step_count: int = 0


def init_session(model: Model, layout: TokenLayout, policy: PolicyConfig,
                 pattern: SparsityPattern, tile_size: int = attention.DEFAULT_TILE) -> SessionState:
    """Validate the policy against this model's depth and open a session."""
    L = model.config.num_layers
    if policy.clie_layer_index >= L:
        raise ConfigurationError(
            f"clie_layer_index ({policy.clie_layer_index}) must be below num_layers ({L})"
        )
    if policy.st_layer_index > L:
        raise ConfigurationError(
            f"st_layer_index ({policy.st_layer_index}) must be at most num_layers ({L})"
        )
    if tile_size < 1:
        raise ConfigurationError("tile_size must be >= 1")
    return SessionState(layout=layout, policy=policy, pattern=pattern, tile_size=tile_size)


def _rmsnorm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt((x * x).mean(axis=1, keepdims=True) + _NORM_EPS)


def _project_heads(h: np.ndarray, weights: LayerWeights, config: ModelConfig):
    n = h.shape[0]
    q = (h @ weights.wq).reshape(n, config.num_q_heads, config.d_k)
    k = (h @ weights.wk).reshape(n, config.num_kv_heads, config.d_k)
    v = (h @ weights.wv).reshape(n, config.num_kv_heads, config.d_v)
    return q, k, v


def _layer_masks(session: SessionState, num_layers: int) -> list[np.ndarray]:
    dense_mask = build_mask(session.layout, SparsityPattern.dense())
    if session.pattern.kind == "dense" or session.policy.st_layer_index >= num_layers:
        sparse_mask = dense_mask
    else:
        sparse_mask = build_mask(session.layout, session.pattern)
    st = session.policy.st_layer_index
    return [dense_mask if layer < st else sparse_mask for layer in range(num_layers)]


def prefill(model: Model, session: SessionState, token_embeddings) -> np.ndarray:
    """Run the whole prompt, populate the cache, and return (l, vocab) logits."""
    c = model.config
    x = np.asarray(token_embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != c.d_model:
        raise ConfigurationError(
            f"embeddings must be (tokens, {c.d_model}), got {x.shape}"
        )
    if x.shape[0] != session.layout.total_len:
        raise ConfigurationError(
            f"embeddings rows ({x.shape[0]}) must match layout total_len "
            f"({session.layout.total_len})"
        )
    if session.cache:
        raise ConfigurationError("session already prefilled")

    l = x.shape[0]
    w, h_count = budget_to_wh(session.policy.budget_fraction, l, session.policy.recent_window_w)
    session.w, session.h = w, h_count
    session.prefill_len = l
    session.prefill_embeddings = x.copy()
    layer_masks = _layer_masks(session, c.num_layers)
    clie = session.policy.clie_layer_index

    x = x.copy()
    for layer in range(c.num_layers):
        hidden = _rmsnorm(x)
        q, k, v = _project_heads(hidden, model.layers[layer], c)
        kv = KvCacheLayer.from_projections(
            [k[:, g, :].copy() for g in range(c.num_kv_heads)],
            [v[:, g, :].copy() for g in range(c.num_kv_heads)],
        )
        session.cache.append(kv)
        mask = layer_masks[layer]

        head_outs = []
        if layer <= clie:
            # Materialized route: weights exist here and nowhere above.
            accumulators = [[] for _ in range(c.num_kv_heads)]
            for q_head in range(c.num_q_heads):
                g = c.kv_group(q_head)
                out, weights = attention.masked(q[:, q_head, :], kv.keys[g], kv.values[g], mask)
                head_outs.append(out)
                if w < l:
                    accumulators[g].append(accumulate_recent_attention(weights, w))
            if w < l:
                c_low = [np.mean(acc, axis=0) for acc in accumulators]
            else:
                c_low = [np.zeros(0) for _ in range(c.num_kv_heads)]
            session.importance.append(ImportanceState(C_low=c_low, w=w, h=h_count, l=l))
        else:
            for q_head in range(c.num_q_heads):
                g = c.kv_group(q_head)
                head_outs.append(attention.streaming_masked(
                    q[:, q_head, :], kv.keys[g], kv.values[g], mask, session.tile_size
                ))
            session.importance.append(None)

        x = x + np.concatenate(head_outs, axis=1) @ model.layers[layer].wo
        hidden2 = _rmsnorm(x)
        x = x + np.maximum(hidden2 @ model.layers[layer].w_up, 0.0) @ model.layers[layer].w_down

    return _rmsnorm(x) @ model.w_vocab


def _instrumented_stats(model: Model, session: SessionState):
    """Forward pass with weights materialized at every layer (analysis only).

    Never called by prefill or decode. Returns, per layer and KV head, the
    recent-window accumulator, the column-sum score, and the value matrix.
    """
    if session.prefill_embeddings is None:
        raise ConfigurationError("instrumentation requires a completed prefill")
    c = model.config
    x = session.prefill_embeddings.copy()
    l = x.shape[0]
    w = session.w
    layer_masks = _layer_masks(session, c.num_layers)
    stats = []
    for layer in range(c.num_layers):
        hidden = _rmsnorm(x)
        q, k, v = _project_heads(hidden, model.layers[layer], c)
        mask = layer_masks[layer]
        accumulators = [[] for _ in range(c.num_kv_heads)]
        colsums = [[] for _ in range(c.num_kv_heads)]
        head_outs = []
        for q_head in range(c.num_q_heads):
            g = c.kv_group(q_head)
            out, weights = attention.masked(q[:, q_head, :], k[:, g, :], v[:, g, :], mask)
            head_outs.append(out)
            if w < l:
                accumulators[g].append(accumulate_recent_attention(weights, w))
            colsums[g].append(baseline_h2o_score(weights))
        stats.append({
            "C": [np.mean(acc, axis=0) if acc else np.zeros(0) for acc in accumulators],
            "colsum": [np.mean(cs, axis=0) for cs in colsums],
            "V": [v[:, g, :].copy() for g in range(c.num_kv_heads)],
        })
        x = x + np.concatenate(head_outs, axis=1) @ model.layers[layer].wo
        hidden2 = _rmsnorm(x)
        x = x + np.maximum(hidden2 @ model.layers[layer].w_up, 0.0) @ model.layers[layer].w_down
    return stats


def apply_compression(model: Model, session: SessionState) -> SessionState:
    """Score, select, and evict once at the end of prefill."""
    if not session.cache:
        raise ConfigurationError("apply_compression requires a completed prefill")
    if session.compressed:
        raise ConfigurationError("compression already applied")
    c = model.config
    policy = session.policy
    l = session.prefill_len
    w, h_count = session.w, session.h
    clie = policy.clie_layer_index

    if policy.policy_kind == "full":
        everything = np.arange(l, dtype=np.int64)
        session.retained = [[everything.copy() for _ in range(c.num_kv_heads)]
                            for _ in range(c.num_layers)]
        session.compressed = True
        return session

    h2o_stats = _instrumented_stats(model, session) if policy.policy_kind == "h2o_like" else None

    retained_all = []
    for layer in range(c.num_layers):
        per_head = []
        for g in range(c.num_kv_heads):
            if w >= l:
                per_head.append(np.arange(l, dtype=np.int64))
                continue
            if policy.policy_kind == "pure_kv":
                source = layer if layer <= clie else clie
                importance = session.importance[source]
                if importance is None or importance.C_low[g].size != l - w:
                    raise ConfigurationError(
                        f"layer {layer}: missing recent-window accumulator for head {g}"
                    )
                values = session.cache[layer].values[g]
                scores = importance.C_low[g] * l2_norm_rows(values[: l - w])
                per_head.append(select_retained(scores, w, h_count, l))
            elif policy.policy_kind == "h2o_like":
                scores = h2o_stats[layer]["colsum"][g][: l - w]
                per_head.append(select_retained(scores, w, h_count, l))
            else:  # streaming_like
                n_keep = w + h_count
                sink = min(policy.sink_len, n_keep)
                per_head.append(baseline_streaming(l, sink, n_keep - sink))
        retained_all.append(per_head)

    for layer in range(c.num_layers):
        session.cache[layer] = evict(session.cache[layer], retained_all[layer])
        session.cache[layer].check_invariants()
    session.retained = retained_all
    session.compressed = True
    return session


def decode_step(model: Model, session: SessionState, token_embedding) -> np.ndarray:
    """One autoregressive step over the retained cache; returns (vocab,) logits."""
    if not session.compressed:
        raise ConfigurationError("decode requires apply_compression (or the full policy) first")
    c = model.config
    x = np.asarray(token_embedding, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != c.d_model:
        raise ConfigurationError(f"token embedding must have length {c.d_model}")

    position = session.prefill_len + session.step_count
    for layer in range(c.num_layers):
        hidden = _rmsnorm(x)
        q, k, v = _project_heads(hidden, model.layers[layer], c)
        kv = session.cache[layer]
        for g in range(c.num_kv_heads):
            kv.append(g, k[0, g, :], v[0, g, :], position)
        head_outs = []
        for q_head in range(c.num_q_heads):
            g = c.kv_group(q_head)
            ones = np.ones((1, kv.rows(g)), dtype=bool)
            head_outs.append(attention.streaming_masked(
                q[:, q_head, :], kv.keys[g], kv.values[g], ones, session.tile_size
            ))
        x = x + np.concatenate(head_outs, axis=1) @ model.layers[layer].wo
        hidden2 = _rmsnorm(x)
        x = x + np.maximum(hidden2 @ model.layers[layer].w_up, 0.0) @ model.layers[layer].w_down

    session.step_count += 1
    return (_rmsnorm(x) @ model.w_vocab)[0]


@dataclass(frozen=True)
class HeadValidation:
    head: int
    rho: float
    pvalue: float


@dataclass(frozen=True)
class LayerValidation:
    layer: int
    heads: tuple[HeadValidation, ...]
    median_rho: float
    median_p: float


@dataclass(frozen=True)
class ValidationReport:
    analysis_layer: int
    layers: tuple[LayerValidation, ...]
    median_rho: float
    median_p: float


def validate_cross_layer(model: Model, session: SessionState, analysis_layer: int | None = None,
                         n_perm: int = 999, seed: int = 0) -> ValidationReport:
    """Rank agreement between reused-accumulator scores and own-layer scores.

    For every layer above the analysis layer and every KV head, correlate
    the estimate (analysis layer's accumulator times this layer's V norms)
    with the ground truth (the layer's own accumulator times the same
    norms). Uses the instrumentation pass, never the production route.
    """
    from .stats import permutation_pvalue, spearman_rho

    c = model.config
    analysis = session.policy.clie_layer_index if analysis_layer is None else analysis_layer
    if not (0 <= analysis < c.num_layers):
        raise ConfigurationError(f"analysis layer {analysis} out of range")
    l = session.prefill_len
    w = session.w
    if l <= w:
        raise ConfigurationError(
            f"validation needs l > w, got l={l}, w={w}"
        )
    stats = _instrumented_stats(model, session)
    c_analysis = stats[analysis]["C"]

    layer_results = []
    all_rho, all_p = [], []
    for layer in range(analysis + 1, c.num_layers):
        head_results = []
        for g in range(c.num_kv_heads):
            norms = l2_norm_rows(stats[layer]["V"][g][: l - w])
            truth = stats[layer]["C"][g] * norms
            estimate = c_analysis[g] * norms
            rho = spearman_rho(estimate, truth)
            p = permutation_pvalue(estimate, truth, n_perm, derive_seed(seed, layer, g))
            head_results.append(HeadValidation(head=g, rho=rho, pvalue=p))
            all_rho.append(rho)
            all_p.append(p)
        layer_results.append(LayerValidation(
            layer=layer,
            heads=tuple(head_results),
            median_rho=float(np.median([hr.rho for hr in head_results])),
            median_p=float(np.median([hr.pvalue for hr in head_results])),
        ))
    if not layer_results:
        raise ConfigurationError("no layers above the analysis layer to validate")
    return ValidationReport(
        analysis_layer=analysis,
        layers=tuple(layer_results),
        median_rho=float(np.median(all_rho)),
        median_p=float(np.median(all_p)),
    )
