"""Budget solver: convert token budgets to bytes, prune per-layer Pareto
frontiers, and route each layer to a config by greedy marginal-ratio allocation.

Policies
--------
* ``full``       -- identity config everywhere, no solve.
* ``1d``         -- one shared keep ratio at 16/16 bits: the largest keep
  whose uniform cost fits the budget.
* ``2d_uniform`` -- one shared keep ratio with fixed 8/4 bits, same rule.
* ``2d``         -- keep fixed by the 2d_uniform rule, per-layer K/V bits
  routed greedily within the remaining budget.
* ``2d_hetero``  -- full per-layer (keep, k_bits, v_bits) routing.

The greedy allocator starts every layer at its minimal-memory config and
repeatedly applies the single frontier upgrade with the largest sensitivity
reduction per byte that still fits, so finished plans are maximal: no single
further upgrade fits the residual budget. ``solve_oracle`` exhaustively
enumerates small instances to bound greedy quality.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from .config import KEEP_RATIOS, ConfigSpace, IDENTITY_CONFIG, LayerCompressionConfig
from .calibration import SensitivityTable
from .errors import (
    ConfigurationError,
    FormatError,
    InfeasibleBudgetError,
    InputError,
    SizeError,
)

PLAN_FORMAT_VERSION = 1
POLICIES = ("full", "1d", "2d_uniform", "2d", "2d_hetero")

# 2d-family policies trade their quantization headroom for a larger token
# budget: 16+16 bits vs 8+4 bits is a factor of 32/12 = 4/1.5.
BUDGET_SCALE = {"full": 1.0, "1d": 1.0, "2d_uniform": 1.0, "2d": 4 / 1.5, "2d_hetero": 4 / 1.5}


@dataclass(frozen=True)
class PlanningDims:
    """Shape of the cache the solver plans for."""

    num_layers: int
    num_kv_heads: int
    head_dim: int
    t_cache: int

    def to_json(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "num_kv_heads": self.num_kv_heads,
            "head_dim": self.head_dim,
            "t_cache": self.t_cache,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PlanningDims":
        return cls(int(obj["num_layers"]), int(obj["num_kv_heads"]),
                   int(obj["head_dim"]), int(obj["t_cache"]))


@dataclass(frozen=True)
class MemoryBudget:
    bytes: float
    nominal_tokens: int | None = None
    scale: float = 1.0

    def to_json(self) -> dict:
        return {"b": self.nominal_tokens, "scale": self.scale, "M_bytes": self.bytes}


@dataclass
class LayerAssignment:
    layer: int
    config: LayerCompressionConfig
    m_bytes: float
    s_pred: float


@dataclass
class RoutingPlan:
    policy: str
    budget: MemoryBudget
    dims: PlanningDims
    model_spec_hash: str
    layers: list[LayerAssignment]
    total_m_bytes: float
    total_s_pred: float
    format_version: int = PLAN_FORMAT_VERSION

    @property
    def configs(self) -> list[LayerCompressionConfig]:
        return [a.config for a in self.layers]

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "policy": self.policy,
            "budget": self.budget.to_json(),
            "dims": self.dims.to_json(),
            "model_spec_hash": self.model_spec_hash,
            "layers": [
                {"layer": a.layer, "keep": a.config.keep, "k_bits": a.config.k_bits,
                 "v_bits": a.config.v_bits, "m_bytes": a.m_bytes, "s_pred": a.s_pred}
                for a in self.layers
            ],
            "totals": {"m_bytes": self.total_m_bytes, "s_pred": self.total_s_pred},
        }


def save_plan(plan: RoutingPlan, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(plan.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_plan(path) -> RoutingPlan:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"plan file is not valid JSON: {exc}") from exc
    try:
        budget = MemoryBudget(
            bytes=float(doc["budget"]["M_bytes"]),
            nominal_tokens=doc["budget"].get("b"),
            scale=float(doc["budget"].get("scale", 1.0)),
        )
        layers = [
            LayerAssignment(
                layer=int(e["layer"]),
                config=LayerCompressionConfig(float(e["keep"]), int(e["k_bits"]), int(e["v_bits"])),
                m_bytes=float(e["m_bytes"]),
                s_pred=float(e["s_pred"]),
            )
            for e in doc["layers"]
        ]
        return RoutingPlan(
            policy=str(doc["policy"]),
            budget=budget,
            dims=PlanningDims.from_json(doc["dims"]),
            model_spec_hash=str(doc["model_spec_hash"]),
            layers=layers,
            total_m_bytes=float(doc["totals"]["m_bytes"]),
            total_s_pred=float(doc["totals"]["s_pred"]),
            format_version=int(doc.get("format_version", 1)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed routing plan: {exc}") from exc


# --------------------------------------------------------------------------
# Memory model
# --------------------------------------------------------------------------

def memory_cost(config: LayerCompressionConfig, t_cache: int,
                num_kv_heads: int, head_dim: int) -> float:
    """Real-valued compressed KV bytes for one layer holding t_cache tokens."""
    if t_cache <= 0 or num_kv_heads <= 0 or head_dim <= 0:
        raise InputError("memory_cost requires positive dimensions")
    return config.keep * t_cache * num_kv_heads * head_dim * (config.k_bits + config.v_bits) / 8.0


def budget_from_tokens(b: int, policy: str, dims: PlanningDims) -> MemoryBudget:
    """Byte budget for a nominal token budget b: L*b*H*D*4, scaled for 2d-family."""
    if policy not in POLICIES:
        raise ConfigurationError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    if b < 1:
        raise InputError("token budget must be >= 1")
    scale = BUDGET_SCALE[policy]
    m = dims.num_layers * (b * scale) * dims.num_kv_heads * dims.head_dim * 4.0
    return MemoryBudget(bytes=m, nominal_tokens=b, scale=scale)


# --------------------------------------------------------------------------
# Pareto frontier
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FrontierPoint:
    config_id: int
    config: LayerCompressionConfig
    m_bytes: float
    s_pred: float


def pareto_prune(configs: list[LayerCompressionConfig], costs: np.ndarray,
                 sens: np.ndarray, ids: list[int] | None = None) -> list[FrontierPoint]:
    """Drop configs dominated in (memory, sensitivity).

    A config is dominated when another has <= memory and <= sensitivity with
    at least one strict; equal (memory, sensitivity) pairs keep the lower id.
    The frontier comes back sorted by strictly ascending memory and strictly
    descending sensitivity.
    """
    if not configs:
        raise InputError("cannot prune an empty config list")
    ids = list(range(len(configs))) if ids is None else ids
    order = sorted(range(len(configs)), key=lambda i: (costs[i], sens[i], ids[i]))
    frontier: list[FrontierPoint] = []
    best_s = math.inf
    # Sorting puts the lowest-sensitivity, lowest-id config first within each
    # equal-memory group, so a strict sensitivity sweep yields strictly
    # ascending memory and strictly descending sensitivity.
    for i in order:
        if sens[i] < best_s:
            frontier.append(FrontierPoint(ids[i], configs[i], float(costs[i]), float(sens[i])))
            best_s = sens[i]
    return frontier


# --------------------------------------------------------------------------
# Policy sub-spaces
# --------------------------------------------------------------------------

def _largest_uniform_keep(budget: MemoryBudget, dims: PlanningDims,
                          k_bits: int, v_bits: int) -> float:
    """Largest keep ratio whose uniform (keep, k_bits, v_bits) plan fits."""
    feasible = [
        keep for keep in KEEP_RATIOS
        if dims.num_layers * memory_cost(
            LayerCompressionConfig(keep, k_bits, v_bits),
            dims.t_cache, dims.num_kv_heads, dims.head_dim) <= budget.bytes
    ]
    if not feasible:
        cheapest = dims.num_layers * memory_cost(
            LayerCompressionConfig(min(KEEP_RATIOS), k_bits, v_bits),
            dims.t_cache, dims.num_kv_heads, dims.head_dim)
        raise InfeasibleBudgetError(cheapest - budget.bytes)
    return max(feasible)


def apply_policy(policy: str, space: ConfigSpace, budget: MemoryBudget,
                 dims: PlanningDims) -> list[LayerCompressionConfig]:
    """The per-layer legal config set under a policy (shared by all layers)."""
    if policy == "full":
        return [IDENTITY_CONFIG]
    if policy == "1d":
        keep = _largest_uniform_keep(budget, dims, 16, 16)
        return [LayerCompressionConfig(keep, 16, 16)]
    if policy == "2d_uniform":
        keep = _largest_uniform_keep(budget, dims, 8, 4)
        return [LayerCompressionConfig(keep, 8, 4)]
    if policy == "2d":
        keep = _largest_uniform_keep(budget, dims, 8, 4)
        return [
            LayerCompressionConfig(keep, kb, vb)
            for kb in (4, 8, 16) for vb in (4, 8, 16)
        ]
    if policy == "2d_hetero":
        return list(space.configs)
    raise ConfigurationError(f"unknown policy {policy!r}; expected one of {POLICIES}")


# --------------------------------------------------------------------------
# Greedy allocation
# --------------------------------------------------------------------------

def _layer_frontiers(table: SensitivityTable, subspace: list[LayerCompressionConfig],
                     dims: PlanningDims) -> list[list[FrontierPoint]]:
    ids = [table.space.index_of(c) for c in subspace]
    costs = np.array([
        memory_cost(c, dims.t_cache, dims.num_kv_heads, dims.head_dim) for c in subspace
    ])
    return [
        pareto_prune(subspace, costs, table.scores[layer, ids], ids=ids)
        for layer in range(dims.num_layers)
    ]


def _total_bytes(frontiers: list[list[FrontierPoint]], idx: list[int],
                 upgrade: int | None = None) -> float:
    """Layer-order sum of current picks, optionally with one layer upgraded."""
    return sum(
        f[idx[layer] + 1].m_bytes if layer == upgrade else f[idx[layer]].m_bytes
        for layer, f in enumerate(frontiers)
    )


def _assemble_plan(policy: str, budget: MemoryBudget, dims: PlanningDims,
                   table: SensitivityTable, picks: list[FrontierPoint]) -> RoutingPlan:
    layers = [
        LayerAssignment(layer=i, config=p.config, m_bytes=p.m_bytes, s_pred=p.s_pred)
        for i, p in enumerate(picks)
    ]
    return RoutingPlan(
        policy=policy, budget=budget, dims=dims,
        model_spec_hash=table.model_spec_hash, layers=layers,
        total_m_bytes=float(sum(a.m_bytes for a in layers)),
        total_s_pred=float(sum(a.s_pred for a in layers)),
    )


def solve_greedy(table: SensitivityTable, budget: MemoryBudget, policy: str,
                 dims: PlanningDims) -> RoutingPlan:
    """Route every layer under the budget by marginal-ratio upgrades.

    Starts from the cheapest config on every layer and repeatedly applies the
    frontier upgrade maximizing (sensitivity drop) / (memory increase) among
    those that still fit; ties break toward the lower layer index, then the
    lower config id. Raises InfeasibleBudgetError (with the byte deficit) if
    even the cheapest configuration everywhere exceeds the budget.
    """
    if table.num_layers != dims.num_layers:
        raise InputError(
            f"table has {table.num_layers} layers but dims expect {dims.num_layers}"
        )
    if policy not in POLICIES:
        raise ConfigurationError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    subspace = apply_policy(policy, table.space, budget, dims)
    frontiers = _layer_frontiers(table, subspace, dims)

    idx = [0] * dims.num_layers  # current frontier position per layer
    start_total = _total_bytes(frontiers, idx)
    if start_total > budget.bytes:
        raise InfeasibleBudgetError(start_total - budget.bytes)

    while True:
        best = None  # (ratio, layer)
        for layer, f in enumerate(frontiers):
            i = idx[layer]
            if i + 1 >= len(f):
                continue
            # Fresh layer-order sums keep feasibility checks free of
            # incremental float drift and identical to the plan totals.
            if _total_bytes(frontiers, idx, upgrade=layer) > budget.bytes:
                continue
            dm = f[i + 1].m_bytes - f[i].m_bytes
            ds = f[i].s_pred - f[i + 1].s_pred
            ratio = ds / dm  # frontier construction guarantees dm > 0
            if best is None or ratio > best[0]:
                best = (ratio, layer)
        if best is None:
            break
        idx[best[1]] += 1

    picks = [frontiers[layer][idx[layer]] for layer in range(dims.num_layers)]
    return _assemble_plan(policy, budget, dims, table, picks)


def plan_is_maximal(plan: RoutingPlan, table: SensitivityTable, dims: PlanningDims) -> bool:
    """True when no single-layer frontier upgrade fits the budget."""
    subspace = apply_policy(plan.policy, table.space, plan.budget, dims)
    frontiers = _layer_frontiers(table, subspace, dims)
    idx = [
        next(i for i, p in enumerate(f) if p.config == plan.layers[layer].config)
        for layer, f in enumerate(frontiers)
    ]
    for layer, f in enumerate(frontiers):
        if idx[layer] + 1 < len(f) and _total_bytes(frontiers, idx, upgrade=layer) <= plan.budget.bytes:
            return False
    return True


# --------------------------------------------------------------------------
# Exhaustive oracle
# --------------------------------------------------------------------------

def solve_oracle(table: SensitivityTable, budget: MemoryBudget, policy: str,
                 dims: PlanningDims, max_layers: int = 4,
                 max_combos: int = 10**8, pareto_first: bool = False) -> RoutingPlan:
    """Exhaustive minimization of total sensitivity subject to the budget.

    Tie-break: the lexicographically smallest config-id vector among optima.
    ``pareto_first`` prunes each layer to its frontier before enumerating --
    value-preserving (any dominated pick can be swapped for its dominator)
    but the reported tie-break vector may differ from the unpruned one.
    """
    if table.num_layers != dims.num_layers:
        raise InputError("table/dims layer mismatch")
    if dims.num_layers > max_layers:
        raise SizeError(f"oracle limited to {max_layers} layers, got {dims.num_layers}")
    subspace = apply_policy(policy, table.space, budget, dims)
    if pareto_first:
        frontiers = _layer_frontiers(table, subspace, dims)
        per_layer = [[(p.config_id, p.config, p.m_bytes, p.s_pred) for p in f] for f in frontiers]
    else:
        ids = [table.space.index_of(c) for c in subspace]
        costs = [memory_cost(c, dims.t_cache, dims.num_kv_heads, dims.head_dim) for c in subspace]
        per_layer = [
            [(cid, c, m, float(table.scores[layer, cid]))
             for cid, c, m in zip(ids, subspace, costs)]
            for layer in range(dims.num_layers)
        ]
    n_combos = 1
    for options in per_layer:
        n_combos *= len(options)
    if n_combos > max_combos:
        raise SizeError(f"{n_combos} candidate vectors exceed the enumeration cap {max_combos}")

    best_s = math.inf
    best_combo = None
    cheapest = sum(min(o[2] for o in options) for options in per_layer)
    if cheapest > budget.bytes:
        raise InfeasibleBudgetError(cheapest - budget.bytes)
    # itertools.product iterates in per-layer id order, so the first strict
    # minimum found is the lexicographically smallest optimum.
    for combo in itertools.product(*per_layer):
        m = sum(o[2] for o in combo)
        if m > budget.bytes:
            continue
        s = sum(o[3] for o in combo)
        if s < best_s:
            best_s = s
            best_combo = combo
    picks = [FrontierPoint(o[0], o[1], o[2], o[3]) for o in best_combo]
    return _assemble_plan(policy, budget, dims, table, picks)


# --------------------------------------------------------------------------
# Ablation arithmetic
# --------------------------------------------------------------------------

def ablation_deltas(values: dict[str, float]) -> dict[str, float]:
    """Split a metric across the policy chain into quant- and evict-routing deltas."""
    for needed in ("2d_uniform", "2d", "2d_hetero"):
        if needed not in values:
            raise InputError(f"ablation needs a value for policy {needed!r}")
    return {
        "delta_quant": values["2d"] - values["2d_uniform"],
        "delta_evict": values["2d_hetero"] - values["2d"],
    }
