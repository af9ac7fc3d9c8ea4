"""Synthetic workloads, experiment orchestration, metrics, and reports.

Workloads are seeded Gaussian embeddings with optional planted salient
tokens: a shared unit direction scaled by (gain - 1) * sqrt(d_model) is added
at known video positions, so retention quality has a ground truth.

Latency is modeled as deterministic multiply-accumulate counts, never
wall-clock. The MAC model (documented in the report under "mac_model"):

    prefill attention   = num_layers * num_q_heads * allowed_pairs * (d_k + d_v)
    prefill projections = num_layers * n * per_token + n * d_model * vocab_size
    decode attention    = num_layers * num_q_heads * retained * (d_k + d_v)
    decode projections  = num_layers * per_token + d_model * vocab_size
    per_token = d_model*(Hq*d_k + Hkv*d_k + Hkv*d_v) + Hq*d_v*d_model
                + 2 * d_model * d_ff

where allowed_pairs counts the pattern's mask entries as if the pattern were
applied at every layer; it is a pattern-level cost metric, deliberately
independent of the layer wiring.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine
from .cache import PolicyConfig
from .errors import ConfigurationError
from .masks import SparsityPattern, TokenLayout, build_mask, mask_density, parse_pattern
from .numerics import derive_seed, random_u64, seeded_gaussian

_BACKGROUND_TAG = 2
_SALIENT_POS_TAG = 3
_SALIENT_DIR_TAG = 5
_DECODE_TAG = 7

MAC_MODEL_NOTES = {
    "prefill": "layers*q_heads*allowed_mask_pairs*(d_k+d_v) attention; "
               "layers*tokens*per_token_projection + tokens*d_model*vocab projections",
    "decode": "layers*q_heads*retained_rows*(d_k+d_v) attention per step; "
              "layers*per_token_projection + d_model*vocab projections per step",
}


@dataclass(frozen=True)
class WorkloadSpec:
    layout: TokenLayout
    num_salient: int
    salient_gain: float
    seed: int

    def __post_init__(self):
        if self.num_salient < 0:
            raise ConfigurationError("num_salient must be >= 0")
        if self.num_salient > self.layout.video_len:
            raise ConfigurationError(
                f"num_salient ({self.num_salient}) exceeds video tokens "
                f"({self.layout.video_len})"
            )
        if self.salient_gain < 1.0:
            raise ConfigurationError("salient_gain must be >= 1")


def generate_workload(spec: WorkloadSpec, d_model: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded embeddings plus the planted salient positions (sorted)."""
    layout = spec.layout
    embeddings = seeded_gaussian(layout.total_len, d_model, derive_seed(spec.seed, _BACKGROUND_TAG))
    if spec.num_salient == 0:
        return embeddings, np.zeros(0, dtype=np.int64)
    keys = random_u64(derive_seed(spec.seed, _SALIENT_POS_TAG), 0, layout.video_len)
    picks = np.sort(np.argsort(keys, kind="stable")[: spec.num_salient])
    salient = (layout.text_prefix_len + picks).astype(np.int64)
    direction = seeded_gaussian(1, d_model, derive_seed(spec.seed, _SALIENT_DIR_TAG))[0]
    direction /= np.sqrt((direction * direction).sum())
    embeddings[salient] += (spec.salient_gain - 1.0) * np.sqrt(d_model) * direction
    return embeddings, salient


def decode_embeddings(spec: WorkloadSpec, d_model: int, steps: int) -> np.ndarray:
    """Seeded decode-phase inputs, shared by every cell of an experiment."""
    if steps == 0:
        return np.zeros((0, d_model))
    return seeded_gaussian(steps, d_model, derive_seed(spec.seed, _DECODE_TAG))


def salient_recall(retained, salient) -> float:
    """Fraction of planted positions that survived eviction."""
    salient = np.asarray(salient, dtype=np.int64)
    if salient.size == 0:
        raise ConfigurationError("salient_recall is undefined for an empty salient set")
    retained = np.asarray(retained, dtype=np.int64)
    return float(np.intersect1d(retained, salient).size / salient.size)


@dataclass(frozen=True)
class MacEstimate:
    attention: int
    projections: int

    @property
    def total(self) -> int:
        return self.attention + self.projections


def estimate_macs(layout: TokenLayout, pattern: SparsityPattern, model_config: engine.ModelConfig,
                  phase: str, retained_count: int | None = None) -> MacEstimate:
    """Deterministic multiply-accumulate counts for one phase; see MAC_MODEL_NOTES."""
    c = model_config
    d_ff = engine._FF_MULT * c.d_model
    per_token = (c.d_model * (c.num_q_heads * c.d_k + c.num_kv_heads * c.d_k
                              + c.num_kv_heads * c.d_v)
                 + c.num_q_heads * c.d_v * c.d_model
                 + 2 * c.d_model * d_ff)
    if phase == "prefill":
        n = layout.total_len
        allowed = int(build_mask(layout, pattern).sum())
        attention = c.num_layers * c.num_q_heads * allowed * (c.d_k + c.d_v)
        projections = c.num_layers * n * per_token + n * c.d_model * c.vocab_size
        return MacEstimate(attention=attention, projections=projections)
    if phase == "decode":
        if retained_count is None or retained_count < 0:
            raise ConfigurationError("decode MAC estimate needs retained_count >= 0")
        attention = c.num_layers * c.num_q_heads * retained_count * (c.d_k + c.d_v)
        projections = c.num_layers * per_token + c.d_model * c.vocab_size
        return MacEstimate(attention=attention, projections=projections)
    raise ConfigurationError(f"unknown phase {phase!r}, expected 'prefill' or 'decode'")


# --- config parsing -------------------------------------------------------

def _need(obj: dict, path: str, key: str):
    if not isinstance(obj, dict):
        raise ConfigurationError(f"{path}: expected an object")
    if key not in obj:
        raise ConfigurationError(f"{path}.{key}: missing required field")
    return obj[key]


def _int_field(obj: dict, path: str, key: str, minimum: int | None = None) -> int:
    value = _need(obj, path, key)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigurationError(f"{path}.{key}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigurationError(f"{path}.{key}: must be >= {minimum}, got {value}")
    return value


def _float_field(obj: dict, path: str, key: str) -> float:
    value = _need(obj, path, key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigurationError(f"{path}.{key}: expected a number, got {value!r}")
    return float(value)


def _list_field(obj: dict, path: str, key: str) -> list:
    value = _need(obj, path, key)
    if not isinstance(value, list):
        raise ConfigurationError(f"{path}.{key}: expected a list")
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    model: engine.ModelConfig
    layout: TokenLayout
    workload: WorkloadSpec
    recent_window_w: int
    sink_len: int
    clie_layer_index: int
    st_layer_index: int
    policies: tuple[str, ...]
    patterns: tuple[str, ...]
    budgets: tuple[float, ...]
    decode_steps: int
    tile_size: int
    validate: bool
    n_perm: int
    stats_seed: int
    raw: dict


def load_config(source) -> ExperimentConfig:
    """Parse a config document (path or dict); errors name the JSON path."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
    elif isinstance(source, dict):
        raw = source
    else:
        raise ConfigurationError(f"config must be a path or dict, got {type(source)}")

    model_obj = _need(raw, "config", "model")
    model = engine.ModelConfig(
        num_layers=_int_field(model_obj, "config.model", "num_layers", 1),
        d_model=_int_field(model_obj, "config.model", "d_model", 1),
        num_q_heads=_int_field(model_obj, "config.model", "num_q_heads", 1),
        num_kv_heads=_int_field(model_obj, "config.model", "num_kv_heads", 1),
        d_k=_int_field(model_obj, "config.model", "d_k", 1),
        d_v=_int_field(model_obj, "config.model", "d_v", 1),
        vocab_size=_int_field(model_obj, "config.model", "vocab_size", 1),
        seed=_int_field(model_obj, "config.model", "seed", 0),
    )
    layout_obj = _need(raw, "config", "layout")
    layout = TokenLayout(
        text_prefix_len=_int_field(layout_obj, "config.layout", "text_prefix_len", 0),
        num_frames=_int_field(layout_obj, "config.layout", "num_frames", 0),
        patches_per_frame=_int_field(layout_obj, "config.layout", "patches_per_frame", 0),
        text_suffix_len=_int_field(layout_obj, "config.layout", "text_suffix_len", 0),
    )
    workload_obj = _need(raw, "config", "workload")
    workload = WorkloadSpec(
        layout=layout,
        num_salient=_int_field(workload_obj, "config.workload", "num_salient", 0),
        salient_gain=_float_field(workload_obj, "config.workload", "salient_gain"),
        seed=_int_field(workload_obj, "config.workload", "seed", 0),
    )
    policy_obj = _need(raw, "config", "policy")
    recent_window_w = _int_field(policy_obj, "config.policy", "recent_window_w", 1)
    sink_len = _int_field(policy_obj, "config.policy", "sink_len", 0)
    clie = _int_field(policy_obj, "config.policy", "clie_layer_index", 0)
    st = _int_field(policy_obj, "config.policy", "st_layer_index", 0)

    exp_obj = _need(raw, "config", "experiment")
    policies = _list_field(exp_obj, "config.experiment", "policies")
    for i, p in enumerate(policies):
        if p not in ("pure_kv", "h2o_like", "streaming_like", "full"):
            raise ConfigurationError(f"config.experiment.policies[{i}]: unknown policy {p!r}")
    patterns = _list_field(exp_obj, "config.experiment", "patterns")
    for i, p in enumerate(patterns):
        if not isinstance(p, str):
            raise ConfigurationError(f"config.experiment.patterns[{i}]: expected a string")
        parse_pattern(p, layout)
    budgets = _list_field(exp_obj, "config.experiment", "budgets")
    for i, b in enumerate(budgets):
        if isinstance(b, bool) or not isinstance(b, (int, float)) or not (0.0 < b <= 1.0):
            raise ConfigurationError(
                f"config.experiment.budgets[{i}]: expected a fraction in (0, 1], got {b!r}"
            )

    n_perm = exp_obj.get("n_perm", 999)
    if isinstance(n_perm, bool) or not isinstance(n_perm, int) or n_perm < 100:
        raise ConfigurationError(
            f"config.experiment.n_perm: expected an integer >= 100, got {n_perm!r}"
        )
    stats_seed = exp_obj.get("stats_seed", 0)
    if isinstance(stats_seed, bool) or not isinstance(stats_seed, int):
        raise ConfigurationError("config.experiment.stats_seed: expected an integer")

    config = ExperimentConfig(
        model=model,
        layout=layout,
        workload=workload,
        recent_window_w=recent_window_w,
        sink_len=sink_len,
        clie_layer_index=clie,
        st_layer_index=st,
        policies=tuple(policies),
        patterns=tuple(patterns),
        budgets=tuple(float(b) for b in budgets),
        decode_steps=_int_field(exp_obj, "config.experiment", "decode_steps", 0),
        tile_size=_int_field(exp_obj, "config.experiment", "tile_size", 1),
        validate=bool(exp_obj.get("validate", False)),
        n_perm=n_perm,
        stats_seed=stats_seed,
        raw=raw,
    )
    # Fail fast on incoherent layer indices instead of inside the first cell.
    PolicyConfig(
        policy_kind="full", budget_fraction=1.0, recent_window_w=recent_window_w,
        sink_len=sink_len, clie_layer_index=clie, st_layer_index=st,
    )
    if clie >= model.num_layers:
        raise ConfigurationError(
            f"config.policy.clie_layer_index: must be below num_layers ({model.num_layers})"
        )
    if st > model.num_layers:
        raise ConfigurationError(
            f"config.policy.st_layer_index: must be at most num_layers ({model.num_layers})"
        )
    return config


# --- experiment loop ------------------------------------------------------

def _experiment_cells(config: ExperimentConfig):
    for policy in config.policies:
        budgets = (1.0,) if policy == "full" else config.budgets
        for pattern in config.patterns:
            for budget in budgets:
                yield policy, pattern, budget


def _run_cell(model, config: ExperimentConfig, policy_kind: str, pattern: SparsityPattern,
              budget: float, embeddings, decode_rows):
    policy = PolicyConfig(
        policy_kind=policy_kind,
        budget_fraction=budget,
        recent_window_w=config.recent_window_w,
        sink_len=config.sink_len,
        clie_layer_index=config.clie_layer_index,
        st_layer_index=config.st_layer_index,
    )
    session = engine.init_session(model, config.layout, policy, pattern, config.tile_size)
    engine.prefill(model, session, embeddings)
    engine.apply_compression(model, session)
    retained_counts = {
        session.cache[layer].rows(g)
        for layer in range(config.model.num_layers)
        for g in range(config.model.num_kv_heads)
    }
    if len(retained_counts) != 1:
        raise AssertionError(f"retained counts differ across heads: {retained_counts}")
    logits = [engine.decode_step(model, session, row) for row in decode_rows]
    return session, int(next(iter(retained_counts))), logits


def run_experiment(source) -> dict:
    """Run the whole (policy x pattern x budget) grid; returns the report dict."""
    config = source if isinstance(source, ExperimentConfig) else load_config(source)
    model = engine.init_model(config.model)
    embeddings, salient = generate_workload(config.workload, config.model.d_model)
    decode_rows = decode_embeddings(config.workload, config.model.d_model, config.decode_steps)

    dense = SparsityPattern.dense()
    _, _, reference_logits = _run_cell(
        model, config, "full", dense, 1.0, embeddings, decode_rows
    )

    validation_cache: dict[tuple[str, float], dict] = {}
    cells = []
    for policy_kind, pattern_text, budget in _experiment_cells(config):
        pattern = parse_pattern(pattern_text, config.layout)
        session, retained_count, logits = _run_cell(
            model, config, policy_kind, pattern, budget, embeddings, decode_rows
        )
        l = session.prefill_len
        divergence = 0.0
        for step_logits, ref in zip(logits, reference_logits):
            divergence = max(divergence, float(np.max(np.abs(step_logits - ref))))

        recall = None
        if salient.size:
            per_set = [
                salient_recall(session.retained[layer][g], salient)
                for layer in range(config.model.num_layers)
                for g in range(config.model.num_kv_heads)
            ]
            recall = float(np.mean(per_set))

        prefill_macs = estimate_macs(config.layout, pattern, config.model, "prefill")
        decode_macs = estimate_macs(config.layout, pattern, config.model, "decode",
                                    retained_count=retained_count)

        validation = None
        if config.validate:
            key = (pattern.describe(), budget)
            if key not in validation_cache:
                report = engine.validate_cross_layer(
                    model, session, n_perm=config.n_perm, seed=config.stats_seed
                )
                validation_cache[key] = _validation_dict(report)
            validation = validation_cache[key]

        cells.append({
            "policy": policy_kind,
            "pattern": pattern.describe(),
            "budget_fraction": budget,
            "sequence_len": l,
            "recent_window": session.w,
            "top_h": session.h,
            "retained_per_head": retained_count,
            "compression_ratio": float(l / retained_count),
            "mask_density": mask_density(build_mask(config.layout, pattern)),
            "prefill_macs_total": prefill_macs.total,
            "prefill_macs_attention": prefill_macs.attention,
            "decode_macs_total_per_step": decode_macs.total,
            "decode_macs_attention_per_step": decode_macs.attention,
            "output_divergence_vs_full": divergence,
            "salient_recall": recall,
            "validation": validation,
        })

    return {
        "config": config.raw,
        "mac_model": dict(MAC_MODEL_NOTES),
        "cells": cells,
    }


def _validation_dict(report: engine.ValidationReport) -> dict:
    return {
        "analysis_layer": report.analysis_layer,
        "median_rho": report.median_rho,
        "median_p": report.median_p,
        "per_layer": [
            {
                "layer": lv.layer,
                "median_rho": lv.median_rho,
                "median_p": lv.median_p,
                "heads": [
                    {"head": hv.head, "rho": hv.rho, "p": hv.pvalue} for hv in lv.heads
                ],
            }
            for lv in report.layers
        ],
    }


# --- report emission ------------------------------------------------------

def _round6(value):
    """Recursively format floats at 6 significant digits, keeping ints exact."""
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, float):
        return float(f"{value:.6g}")
    if isinstance(value, dict):
        return {k: _round6(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_round6(v) for v in value]
    return value


_CSV_COLUMNS = (
    "policy", "pattern", "budget_fraction", "sequence_len", "recent_window", "top_h",
    "retained_per_head", "compression_ratio", "mask_density",
    "prefill_macs_total", "prefill_macs_attention",
    "decode_macs_total_per_step", "decode_macs_attention_per_step",
    "output_divergence_vs_full", "salient_recall", "median_rho", "median_p",
)


def _csv_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def render_report(report: dict, fmt: str) -> str:
    """Serialize a report; floats carry 6 significant digits in either format."""
    if fmt == "json":
        return json.dumps(_round6(report), indent=2) + "\n"
    if fmt != "csv":
        raise ConfigurationError(f"unknown report format {fmt!r}, expected 'json' or 'csv'")

    layer_ids = []
    for cell in report["cells"]:
        if cell.get("validation"):
            layer_ids = [entry["layer"] for entry in cell["validation"]["per_layer"]]
            break
    header = list(_CSV_COLUMNS) + [
        f"layer{i}_{stat}" for i in layer_ids for stat in ("median_rho", "median_p")
    ]
    lines = [",".join(header)]
    for cell in report["cells"]:
        row = [_csv_value(cell[col]) for col in _CSV_COLUMNS[:15]]
        validation = cell.get("validation")
        row.append(_csv_value(validation["median_rho"] if validation else None))
        row.append(_csv_value(validation["median_p"] if validation else None))
        per_layer = {e["layer"]: e for e in validation["per_layer"]} if validation else {}
        for i in layer_ids:
            entry = per_layer.get(i)
            row.append(_csv_value(entry["median_rho"] if entry else None))
            row.append(_csv_value(entry["median_p"] if entry else None))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def emit_report(report: dict, fmt: str, out_path) -> Path:
    """Write the rendered report; I/O failures surface the offending path."""
    path = Path(out_path)
    text = render_report(report, fmt)
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"failed to write report to {path}: {exc}") from exc
    return path
