"""Per-layer sensitivity calibration, proxy validation, and table persistence.

``calibrate_l2`` builds the L x |configs| sensitivity table by running the
model once per (layer, config) cell with only that layer compressed and
measuring the relative L2 error of the layer's own attention output against
the uncompressed reference, averaged over token positions. ``calibrate_kl``
is the expensive validation counterpart: mean KL divergence between the full
and perturbed next-token distributions over held-out sequences.

Cell computations are independent; with ``workers > 1`` they run on a thread
pool and the table assembles by (layer, config) key, so parallel and serial
runs produce identical tables.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sstats

from .config import ConfigSpace, LayerCompressionConfig
from .errors import (
    CalibrationError,
    FormatError,
    InputError,
    StaleCalibrationError,
)
from .model import ToyModel, forward_full, forward_with_layer_perturbation

TABLE_FORMAT_VERSION = 1
IDENTITY_TOLERANCE = 1e-7


def _derive_seed(base: int, layer: int) -> int:
    # One permutation per layer, shared by every config on that layer, so
    # retained sets nest across keep ratios.
    return (base * 1_000_003 + layer * 7919 + 1) % (2**63)


@dataclass
class SensitivityTable:
    """L x |configs| damage scores plus the provenance needed to reuse them."""

    scores: np.ndarray
    space: ConfigSpace
    model_spec_hash: str
    prompt_id: str
    metric: str           # "l2_proxy" | "kl"
    scorer: str
    seed: int
    format_version: int = TABLE_FORMAT_VERSION

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.validate()

    @property
    def num_layers(self) -> int:
        return self.scores.shape[0]

    def validate(self) -> None:
        if self.scores.ndim != 2 or self.scores.shape[1] != len(self.space):
            raise FormatError(
                f"score matrix {self.scores.shape} does not match "
                f"{len(self.space)}-config space"
            )
        if not np.all(np.isfinite(self.scores)):
            raise FormatError("sensitivity table contains non-finite scores")
        if np.any(self.scores < 0):
            raise FormatError("sensitivity table contains negative scores")
        ident = self.scores[:, self.space.identity_id]
        if np.any(np.abs(ident) > IDENTITY_TOLERANCE):
            raise FormatError(
                f"identity-config column must be zero within {IDENTITY_TOLERANCE}"
            )

    def column(self, config: LayerCompressionConfig) -> np.ndarray:
        return self.scores[:, self.space.index_of(config)]

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "model_spec_hash": self.model_spec_hash,
            "metric": self.metric,
            "scorer": self.scorer,
            "seed": self.seed,
            "prompt_id": self.prompt_id,
            "space_name": self.space.name,
            "configs": self.space.to_json(),
            "num_layers": self.num_layers,
            "scores": [float(s) for s in self.scores.reshape(-1)],  # row-major
        }


def save_table(table: SensitivityTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(table.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_table(path, expect_spec_hash: str | None = None) -> SensitivityTable:
    """Load and re-validate a table; reject one built for another model."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"table file is not valid JSON: {exc}") from exc
    try:
        space = ConfigSpace.from_json(doc.get("space_name", "custom"), doc["configs"])
        layers = int(doc["num_layers"])
        flat = np.asarray(doc["scores"], dtype=np.float64)
        table = SensitivityTable(
            scores=flat.reshape(layers, len(space)),
            space=space,
            model_spec_hash=str(doc["model_spec_hash"]),
            prompt_id=str(doc.get("prompt_id", "")),
            metric=str(doc["metric"]),
            scorer=str(doc["scorer"]),
            seed=int(doc["seed"]),
            format_version=int(doc.get("format_version", 1)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed sensitivity table: {exc}") from exc
    if expect_spec_hash is not None and table.model_spec_hash != expect_spec_hash:
        raise StaleCalibrationError(
            "sensitivity table was calibrated for a different model "
            f"(table {table.model_spec_hash[:12]}..., model {expect_spec_hash[:12]}...)"
        )
    return table


def export_table_csv(table: SensitivityTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "config_id", "keep", "k_bits", "v_bits", "score"])
        for layer in range(table.num_layers):
            for cid, cfg in enumerate(table.space):
                writer.writerow(
                    [layer, cid, cfg.keep, cfg.k_bits, cfg.v_bits,
                     repr(table.scores[layer, cid])]
                )


def prompt_id(token_ids) -> str:
    ids = np.asarray(token_ids, dtype=np.int64)
    digest = hashlib.sha256(ids.tobytes()).hexdigest()[:16]
    return f"len{ids.size}_{digest}"


# --------------------------------------------------------------------------
# L2 proxy calibration
# --------------------------------------------------------------------------

def _relative_l2(reference: np.ndarray, perturbed: np.ndarray) -> float:
    """Per-position relative L2 error, averaged over token positions."""
    ref_norm = np.linalg.norm(reference.astype(np.float64), axis=1)
    diff_norm = np.linalg.norm(
        perturbed.astype(np.float64) - reference.astype(np.float64), axis=1
    )
    out = np.zeros_like(ref_norm)
    zero = ref_norm == 0.0
    if np.any(zero & (diff_norm > 0.0)):
        raise CalibrationError(
            "reference attention output has zero norm at a position with a "
            "non-zero perturbation; score undefined"
        )
    out[~zero] = diff_norm[~zero] / ref_norm[~zero]
    return float(out.mean())


def _run_cells(num_layers: int, space: ConfigSpace, cell_fn, workers: int) -> np.ndarray:
    keys = [(layer, cid) for layer in range(num_layers) for cid in range(len(space))]
    scores = np.zeros((num_layers, len(space)), dtype=np.float64)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for (layer, cid), value in zip(keys, pool.map(lambda k: cell_fn(*k), keys)):
                scores[layer, cid] = value
    else:
        for layer, cid in keys:
            scores[layer, cid] = cell_fn(layer, cid)
    return scores


def calibrate_l2(
    model: ToyModel,
    prompt,
    space: ConfigSpace,
    seed: int,
    scorer: str = "random_perm",
    group_size: int = 32,
    workers: int = 1,
) -> SensitivityTable:
    """Attention-output L2 proxy over every (layer, config) cell."""
    prompt = list(prompt)
    if len(prompt) < 2:
        raise InputError("calibration prompt must have at least 2 tokens")
    reference = forward_full(model, prompt)

    def cell(layer: int, cid: int) -> float:
        cfg = space.configs[cid]
        acts = forward_with_layer_perturbation(
            model, prompt, layer, cfg, _derive_seed(seed, layer),
            scorer=scorer, group_size=group_size,
        )
        return _relative_l2(reference.attn_outputs[layer], acts.attn_outputs[layer])

    scores = _run_cells(model.spec.num_layers, space, cell, workers)
    return SensitivityTable(
        scores=scores, space=space, model_spec_hash=model.spec_hash(),
        prompt_id=prompt_id(prompt), metric="l2_proxy", scorer=scorer, seed=seed,
    )


# --------------------------------------------------------------------------
# KL validation calibration
# --------------------------------------------------------------------------

def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) for probability vectors, natural log; 0*log(0/q) = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InputError("distributions must share a shape")
    mask = p > 0.0
    if np.any(mask & (q <= 0.0)):
        return float("inf")
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    x = logits.astype(np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def kl_from_logits(p_logits: np.ndarray, q_logits: np.ndarray) -> np.ndarray:
    """Row-wise KL(softmax(p) || softmax(q)), numerically stable."""
    lp = _log_softmax(np.atleast_2d(p_logits))
    lq = _log_softmax(np.atleast_2d(q_logits))
    return np.sum(np.exp(lp) * (lp - lq), axis=-1)


def make_heldout_sequences(vocab_size: int, count: int, length: int, seed: int) -> list[list[int]]:
    """Seeded random token sequences standing in for held-out text."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return [list(map(int, rng.integers(0, vocab_size, size=length))) for _ in range(count)]


def calibrate_kl(
    model: ToyModel,
    heldout: list,
    space: ConfigSpace,
    seed: int,
    scorer: str = "random_perm",
    group_size: int = 32,
    workers: int = 1,
) -> SensitivityTable:
    """Mean next-token KL(full || perturbed) over held-out sequences and positions."""
    heldout = [list(s) for s in heldout]
    if not heldout or any(len(s) < 2 for s in heldout):
        raise InputError("each held-out sequence must have at least 2 tokens")
    references = [forward_full(model, s, record=False).logits for s in heldout]

    def cell(layer: int, cid: int) -> float:
        cfg = space.configs[cid]
        per_seq = []
        for s, ref_logits in zip(heldout, references):
            acts = forward_with_layer_perturbation(
                model, s, layer, cfg, _derive_seed(seed, layer),
                scorer=scorer, group_size=group_size, record=False,
            )
            per_seq.append(kl_from_logits(ref_logits, acts.logits).mean())
        value = float(np.mean(per_seq))
        if not np.isfinite(value) or value < -1e-12:
            raise CalibrationError(f"KL cell ({layer}, {cid}) is not a finite non-negative value")
        return max(value, 0.0)  # swallow float residue on near-identical distributions

    scores = _run_cells(model.spec.num_layers, space, cell, workers)
    return SensitivityTable(
        scores=scores, space=space, model_spec_hash=model.spec_hash(),
        prompt_id=f"heldout{len(heldout)}x{len(heldout[0])}", metric="kl",
        scorer=scorer, seed=seed,
    )


# --------------------------------------------------------------------------
# Proxy-vs-KL correlation
# --------------------------------------------------------------------------

@dataclass
class CorrelationReport:
    """Per-layer and per-config agreement between two sensitivity tables."""

    per_layer_pearson: list[float | None]
    per_layer_spearman: list[float | None]
    per_config_pearson: list[float | None]   # indexed by config id; identity -> None
    mean_pearson: float | None
    mean_spearman: float | None
    config_labels: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "per_layer_pearson": self.per_layer_pearson,
            "per_layer_spearman": self.per_layer_spearman,
            "per_config_pearson": self.per_config_pearson,
            "mean_pearson": self.mean_pearson,
            "mean_spearman": self.mean_spearman,
            "config_labels": self.config_labels,
        }


def _pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    if np.std(a) == 0.0 or np.std(b) == 0.0:
        return None  # undefined for constant vectors
    return float(sstats.pearsonr(a, b).statistic)

def _spearman(a: np.ndarray, b: np.ndarray) -> float | None:
    if np.std(a) == 0.0 or np.std(b) == 0.0:
        return None
    return float(sstats.spearmanr(a, b).statistic)


def _mean_defined(values: list[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def correlate(table_a: SensitivityTable, table_b: SensitivityTable) -> CorrelationReport:
    """Pearson/Spearman agreement; identity column excluded (constant zero)."""
    if table_a.scores.shape != table_b.scores.shape or table_a.space.configs != table_b.space.configs:
        raise InputError("tables must share layer count and config space")
    ident = table_a.space.identity_id
    cols = [c for c in range(len(table_a.space)) if c != ident]
    a, b = table_a.scores, table_b.scores
    per_layer_p = [_pearson(a[l, cols], b[l, cols]) for l in range(table_a.num_layers)]
    per_layer_s = [_spearman(a[l, cols], b[l, cols]) for l in range(table_a.num_layers)]
    per_config_p: list[float | None] = [
        None if c == ident else _pearson(a[:, c], b[:, c])
        for c in range(len(table_a.space))
    ]
    return CorrelationReport(
        per_layer_pearson=per_layer_p,
        per_layer_spearman=per_layer_s,
        per_config_pearson=per_config_p,
        mean_pearson=_mean_defined(per_layer_p),
        mean_spearman=_mean_defined(per_layer_s),
        config_labels=[c.label for c in table_a.space],
    )


# --------------------------------------------------------------------------
# Heterogeneity summary
# --------------------------------------------------------------------------

def heterogeneity_stats(table: SensitivityTable, ops: list[str] | None = None) -> list[dict]:
    """Per single-axis op: min/max over layers and the max/min spread ratio.

    A zero minimum (within 1e-12) yields an infinity sentinel rather than an
    error; the ratio is reported, never asserted.
    """
    rows = []
    for cid, cfg in enumerate(table.space):
        name = cfg.single_axis_name()
        if name is None or name == "identity":
            continue
        if ops is not None and name not in ops:
            continue
        col = table.scores[:, cid]
        lo, hi = float(col.min()), float(col.max())
        ratio = float("inf") if lo <= 1e-12 else hi / lo
        rows.append({"op": name, "config_id": cid, "min": lo, "max": hi, "ratio": ratio})
    return rows
