"""Per-layer KV-cache compression routing on a deterministic toy transformer.

The pipeline: calibrate per-layer sensitivity to (eviction keep-ratio,
K-bits, V-bits) configs, route each layer under a global memory budget with a
greedy marginal-ratio solver, then decode through a heterogeneous quantized
cache and measure divergence against the dense reference.
"""

from .cache import HeteroKVCache, LayerCacheState
from .calibration import (
    CorrelationReport,
    SensitivityTable,
    calibrate_kl,
    calibrate_l2,
    correlate,
    heterogeneity_stats,
    kl_divergence,
    load_table,
    make_heldout_sequences,
    save_table,
)
from .config import (
    BIT_WIDTHS,
    IDENTITY_CONFIG,
    KEEP_RATIOS,
    ConfigSpace,
    LayerCompressionConfig,
    calib11_space,
    full_space,
    space_by_name,
    table2_space,
)
from .decode import DecodeTrace, decode, dense_reference, memory_report
from .errors import (
    CalibrationError,
    ConfigurationError,
    FormatError,
    InfeasibleBudgetError,
    InputError,
    KvRouterError,
    ProtocolError,
    ShapeError,
    SizeError,
    StaleCalibrationError,
    StateError,
)
from .eviction import (
    ImportanceScores,
    RetainedSet,
    score_attention_accumulation,
    score_random_permutation,
    score_trigonometric,
    select_retained,
)
from .model import (
    CALIBRATION_PROMPT,
    DESK_SPEC,
    LayerActivations,
    ModelSpec,
    ToyModel,
    build_model,
    forward_full,
    forward_with_layer_perturbation,
    rope_inverse,
    rope_rotate,
)
from .quant import QuantizedBlock, dequantize, quantize_k, quantize_v, stored_bytes
from .solver import (
    POLICIES,
    MemoryBudget,
    PlanningDims,
    RoutingPlan,
    ablation_deltas,
    apply_policy,
    budget_from_tokens,
    load_plan,
    memory_cost,
    pareto_prune,
    save_plan,
    solve_greedy,
    solve_oracle,
)

__version__ = "0.1.0"
