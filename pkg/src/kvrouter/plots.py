"""Figure rendering for the consolidated report.

Every function takes already-aggregated rows and writes one PNG. Figures are
deterministic for fixed inputs: Agg backend, fixed sizes, metadata stripped.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_PNG_KW = dict(dpi=120, metadata={"Software": None})


def save_heterogeneity_fig(rows: list[dict], path) -> None:
    """Bar chart of per-op max/min sensitivity spread across layers (log scale)."""
    ops = [r["op"] for r in rows]
    ratios = [r["ratio"] for r in rows]
    finite = [min(r, 1e6) for r in ratios]
    fig, ax = plt.subplots(figsize=(7.0, 3.2))
    ax.bar(range(len(ops)), finite, color="#4c72b0")
    ax.set_yscale("log")
    ax.set_xticks(range(len(ops)))
    ax.set_xticklabels(ops, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("max / min across layers")
    ax.set_title("Per-operation sensitivity spread")
    ax.axhline(1.0, color="gray", lw=0.8, ls="--")
    fig.tight_layout()
    fig.savefig(path, **_PNG_KW)
    plt.close(fig)


def save_memory_fig(rows: list[dict], path) -> None:
    """Predicted and realized cache bytes per policy across nominal budgets."""
    policies = sorted({r["policy"] for r in rows})
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for policy in policies:
        pts = sorted(
            [r for r in rows if r["policy"] == policy and r.get("b") is not None],
            key=lambda r: r["b"],
        )
        if not pts:
            continue
        budgets = [r["b"] for r in pts]
        ax.plot(budgets, [r["M_bytes"] / 2**20 for r in pts], marker="o", label=f"{policy} budget")
        if any(r.get("realized_bytes") for r in pts):
            ax.plot(budgets, [(r.get("realized_bytes") or 0) / 2**20 for r in pts],
                    marker="x", ls="--", label=f"{policy} realized")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("nominal token budget")
    ax.set_ylabel("MiB")
    ax.set_title("Cache memory by policy and budget")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, **_PNG_KW)
    plt.close(fig)


def save_ablation_fig(rows: list[dict], path) -> None:
    """Grouped bars: quant-routing vs evict-routing deltas per budget."""
    budgets = [str(r["b"]) for r in rows]
    x = np.arange(len(budgets))
    fig, ax = plt.subplots(figsize=(5.6, 3.2))
    ax.bar(x - 0.2, [r["delta_quant"] for r in rows], width=0.4, label="quant routing")
    ax.bar(x + 0.2, [r["delta_evict"] for r in rows], width=0.4, label="evict routing")
    ax.set_xticks(x)
    ax.set_xticklabels(budgets)
    ax.set_xlabel("nominal token budget")
    ax.set_ylabel(rows[0].get("metric", "delta") if rows else "delta")
    ax.set_title("Routing ablation deltas")
    ax.axhline(0.0, color="gray", lw=0.8)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_PNG_KW)
    plt.close(fig)


def save_correlation_fig(per_layer_pearson, per_layer_spearman, path) -> None:
    """Per-layer agreement between the cheap proxy and the KL calibration."""
    layers = np.arange(len(per_layer_pearson))
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    pear = [np.nan if v is None else v for v in per_layer_pearson]
    spear = [np.nan if v is None else v for v in per_layer_spearman]
    ax.bar(layers - 0.2, pear, width=0.4, label="Pearson")
    ax.bar(layers + 0.2, spear, width=0.4, label="Spearman")
    ax.set_ylim(-1.05, 1.05)
    ax.set_xticks(layers)
    ax.set_xlabel("layer")
    ax.set_ylabel("coefficient")
    ax.set_title("Proxy vs KL correlation per layer")
    ax.axhline(0.0, color="gray", lw=0.8)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_PNG_KW)
    plt.close(fig)
