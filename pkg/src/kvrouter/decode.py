"""Autoregressive decoding of the toy model through a routed heterogeneous cache.

``decode`` greedily generates tokens twice: once through ``HeteroKVCache``
under a routing plan, and once through the dense full-sequence forward as an
independent reference (recomputed from scratch per step, never through the
cache, so the two paths share no code on the attention side). The trace holds
per-step cache lengths, payload bytes, eviction events, and divergence
metrics: mean per-step KL(dense || compressed) over next-token distributions,
the max per-step logit deviation, and the first step where the greedy token
choices part ways.

Eviction triggers are decode-time only: the prompt is prefilled without
eviction checks, and prompt tokens count toward the step trigger.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .cache import HeteroKVCache
from .calibration import kl_from_logits
from .errors import ConfigurationError, InputError
from .eviction import score_random_permutation
from .model import ToyModel, forward_full, rms_norm, rope_rotate_sequence, silu
from .solver import RoutingPlan

_REFERENCE_CACHE: dict[tuple, tuple[list[int], list[np.ndarray]]] = {}


@dataclass
class StepRecord:
    step: int
    position: int
    token: int
    layer_lengths: list[int]
    payload_bytes: float
    evictions: list[dict] = field(default_factory=list)


@dataclass
class DecodeTrace:
    policy: str
    nominal_tokens: int | None
    prompt_len: int
    steps: int
    tokens: list[int]
    ref_tokens: list[int]
    per_step: list[StepRecord]
    mean_kl: float
    max_logit_dev: float
    first_divergence: int
    realized_peak_bytes: float
    plan_predicted_bytes: float
    budget_bytes: float
    final_cache: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "policy": self.policy,
            "b": self.nominal_tokens,
            "prompt_len": self.prompt_len,
            "steps": self.steps,
            "tokens": self.tokens,
            "ref_tokens": self.ref_tokens,
            "metrics": {
                "mean_kl": self.mean_kl,
                "max_logit_dev": self.max_logit_dev,
                "first_divergence": self.first_divergence,
            },
            "realized_peak_bytes": self.realized_peak_bytes,
            "plan_predicted_bytes": self.plan_predicted_bytes,
            "budget_bytes": self.budget_bytes,
            "final_cache": self.final_cache,
            "per_step": [
                {
                    "step": r.step,
                    "position": r.position,
                    "token": r.token,
                    "layer_lengths": r.layer_lengths,
                    "payload_bytes": r.payload_bytes,
                    "evictions": r.evictions,
                }
                for r in self.per_step
            ],
        }


def _greedy_token(logits: np.ndarray) -> int:
    return int(np.argmax(logits))  # ties resolve to the lowest token id


def dense_reference(model: ToyModel, prompt, steps: int):
    """Greedy dense decode: per-step final-row logits via full re-forwards.

    Plan-independent, so results are cached per (model, prompt, steps); a
    longer cached run serves any shorter request.
    """
    prompt = [int(t) for t in prompt]
    base_key = (model.spec_hash(), tuple(prompt))
    for (h, p, s), value in _REFERENCE_CACHE.items():
        if (h, p) == base_key and s >= steps:
            return value[0][:steps], value[1][: steps + 1]
    seq = list(prompt)
    logits_rows = [forward_full(model, seq, record=False).logits[-1]]
    tokens: list[int] = []
    for _ in range(steps):
        tokens.append(_greedy_token(logits_rows[-1]))
        seq.append(tokens[-1])
        logits_rows.append(forward_full(model, seq, record=False).logits[-1])
    _REFERENCE_CACHE[base_key + (steps,)] = (tokens, logits_rows)
    return tokens, logits_rows


def _cached_step(model: ToyModel, cache: HeteroKVCache, token: int, position: int,
                 record_scores: bool) -> np.ndarray:
    """One token through every layer via the cache; returns the logits row.

    Appends the token's K/V to every layer, attends, and closes the global
    step, so the caller just feeds tokens in order.
    """
    spec = model.spec
    pos = np.array([position])
    x = model.embedding[int(token)][None, :]  # [1, hidden]
    for li, lw in enumerate(model.layers):
        h = rms_norm(x)
        q = (h @ lw.wq).reshape(1, spec.num_q_heads, spec.head_dim)
        k = (h @ lw.wk).reshape(1, spec.num_kv_heads, spec.head_dim)
        v = (h @ lw.wv).reshape(1, spec.num_kv_heads, spec.head_dim)
        q_rot = rope_rotate_sequence(q, pos, spec.rope_base)[0]  # [Hq, D]
        k_rot = rope_rotate_sequence(k, pos, spec.rope_base)[0]  # [Hkv, D]
        cache.append(li, k_rot, v[0], position, k_pre=k[0])
        cache.record_query(li, q[0])
        attn = cache.attend(li, q_rot, position, record_scores=record_scores)
        x = x + (attn.reshape(1, spec.hidden_dim) @ lw.wo)
        x = x + silu(rms_norm(x) @ lw.w_mlp_in) @ lw.w_mlp_out
    cache.end_step()
    return (rms_norm(x) @ model.unembedding)[0]


def _eviction_scores(cache: HeteroKVCache, layer: int, scorer: str, seed: int, step: int):
    if scorer == "attn_accum":
        return cache.accumulated_scores(layer)
    if scorer == "trig":
        return cache.trig_scores(layer)
    if scorer == "random_perm":
        mixed = (seed * 1_000_003 + step * 8191 + layer * 131 + 17) % (2**63)
        return score_random_permutation(cache.layer_length(layer), mixed)
    raise ConfigurationError(f"unknown scorer {scorer!r}")


def decode(model: ToyModel, prompt, plan: RoutingPlan, steps: int,
           scorer: str = "attn_accum", seed: int = 0,
           eviction_period: int = 128, group_size: int = 32) -> DecodeTrace:
    """Greedy decode under the plan, plus the dense reference run for metrics."""
    spec = model.spec
    if plan.dims.num_layers != spec.num_layers:
        raise ConfigurationError(
            f"plan routes {plan.dims.num_layers} layers but model has {spec.num_layers}"
        )
    if plan.model_spec_hash and plan.model_spec_hash != model.spec_hash():
        raise ConfigurationError("plan was solved for a different model")
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise InputError("prompt must be non-empty")
    if steps < 0:
        raise InputError("steps must be >= 0")

    cache = HeteroKVCache(
        spec.num_layers, spec.num_q_heads, spec.num_kv_heads, spec.head_dim,
        configs=plan.configs, eviction_period=eviction_period, group_size=group_size,
    )
    # Prefill: appends only, no eviction checks.
    for t, token in enumerate(prompt):
        logits = _cached_step(model, cache, token, t, record_scores=False)
    peak_bytes = cache.payload_bytes()

    ref_tokens, ref_logits = dense_reference(model, prompt, steps)

    tokens: list[int] = []
    per_step: list[StepRecord] = []
    kls: list[float] = []
    max_dev = 0.0
    for i in range(steps):
        kls.append(float(kl_from_logits(ref_logits[i], logits)[0]))
        max_dev = max(max_dev, float(np.max(np.abs(ref_logits[i] - logits))))
        token = _greedy_token(logits)
        tokens.append(token)
        position = len(prompt) + i
        logits = _cached_step(model, cache, token, position, record_scores=True)
        events = []
        if cache.step_count % eviction_period == 0:  # scoring is wasted off-trigger
            for layer in range(spec.num_layers):
                before = cache.layer_length(layer)
                if cache.maybe_evict(layer, _eviction_scores(cache, layer, scorer, seed, i)):
                    events.append({"layer": layer, "before": before,
                                   "after": cache.layer_length(layer)})
        payload = cache.payload_bytes()
        peak_bytes = max(peak_bytes, payload)
        per_step.append(StepRecord(
            step=i, position=position, token=token,
            layer_lengths=[cache.layer_length(l) for l in range(spec.num_layers)],
            payload_bytes=payload, evictions=events,
        ))

    first_div = steps
    for i, (a, b) in enumerate(zip(tokens, ref_tokens)):
        if a != b:
            first_div = i
            break
    return DecodeTrace(
        policy=plan.policy,
        nominal_tokens=plan.budget.nominal_tokens,
        prompt_len=len(prompt),
        steps=steps,
        tokens=tokens,
        ref_tokens=list(ref_tokens),
        per_step=per_step,
        mean_kl=float(np.mean(kls)) if kls else 0.0,
        max_logit_dev=max_dev,
        first_divergence=first_div,
        realized_peak_bytes=peak_bytes,
        plan_predicted_bytes=plan.total_m_bytes,
        budget_bytes=plan.budget.bytes,
        final_cache=cache.snapshot(),
    )


# --------------------------------------------------------------------------
# Cross-policy memory/divergence report
# --------------------------------------------------------------------------

REPORT_COLUMNS = ("policy", "b", "M_bytes", "realized_bytes", "mean_kl",
                  "first_divergence", "steps")


def memory_report(traces: list[DecodeTrace]) -> list[dict]:
    """One row per trace, ordered by (policy, nominal budget)."""
    if not traces:
        raise InputError("memory report needs at least one trace")
    rows = [
        {
            "policy": t.policy,
            "b": t.nominal_tokens,
            "M_bytes": t.budget_bytes,
            "realized_bytes": t.realized_peak_bytes,
            "mean_kl": t.mean_kl,
            "first_divergence": t.first_divergence,
            "steps": t.steps,
        }
        for t in traces
    ]
    rows.sort(key=lambda r: (str(r["policy"]), r["b"] if r["b"] is not None else -1))
    return rows


def write_report_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(REPORT_COLUMNS))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in REPORT_COLUMNS})


def write_report_json(rows: list[dict], path, extra: dict | None = None) -> None:
    doc = {"format_version": 1, "rows": rows}
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
