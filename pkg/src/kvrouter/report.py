"""Consolidated run report: markdown plus per-section CSV and figures.

``build_report`` scans a run directory for the artifacts the other commands
leave behind (sensitivity tables, correlation report, solve summary, simulate
summary), then emits whichever of the four sections have inputs:

1. per-layer sensitivity spread per operation,
2. memory/divergence by policy and budget,
3. routing ablation deltas,
4. proxy-vs-KL correlation summary.

Output is deterministic: rerunning on unchanged inputs reproduces the
markdown and CSVs byte for byte.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from . import plots
from .calibration import heterogeneity_stats, load_table
from .errors import InputError
from .solver import ablation_deltas

SENS_L2 = "sensitivity_l2.json"
SENS_KL = "sensitivity_kl.json"
CORRELATION = "correlation.json"
SOLVE_SUMMARY = "solve_summary.json"
SIMULATE_SUMMARY = "simulate_summary.json"


def _fmt(value, digits=6) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        if value == float("inf"):
            return "inf"
        return f"{value:.{digits}g}"
    return str(value)


def _md_table(header: list[str], rows: list[list]) -> list[str]:
    lines = ["| " + " | ".join(header) + " |",
             "| " + " | ".join("---" for _ in header) + " |"]
    for row in rows:
        lines.append("| " + " | ".join(_fmt(v) for v in row) + " |")
    return lines


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _load_json(path: Path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def build_report(run_dir, out_dir=None, figures: bool = True) -> dict:
    """Assemble report.md (+ CSVs, + PNGs) from whatever the run produced."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    fig_dir = out_dir / "figures"

    sections: dict[str, bool] = {}
    lines: list[str] = ["# Routing run report", ""]

    # -- 1. sensitivity spread ---------------------------------------------
    table_path = run_dir / SENS_L2
    if not table_path.exists():
        table_path = run_dir / SENS_KL
    if table_path.exists():
        table = load_table(table_path)
        stats = heterogeneity_stats(table)
        if stats:
            rows = [[r["op"], r["min"], r["max"], r["ratio"]] for r in stats]
            lines += [f"## Per-layer sensitivity spread ({table.metric})", ""]
            lines += _md_table(["op", "min over layers", "max over layers", "max/min"], rows)
            lines.append("")
            _write_csv(out_dir / "report_heterogeneity.csv",
                       ["op", "min", "max", "ratio"], rows)
            if figures:
                fig_dir.mkdir(exist_ok=True)
                plots.save_heterogeneity_fig(stats, fig_dir / "heterogeneity.png")
                lines += ["![sensitivity spread](figures/heterogeneity.png)", ""]
            sections["heterogeneity"] = True

    # -- 2. memory by policy and budget -------------------------------------
    mem_rows: list[dict] = []
    solve_doc = None
    if (run_dir / SOLVE_SUMMARY).exists():
        solve_doc = _load_json(run_dir / SOLVE_SUMMARY)
    sim_doc = None
    if (run_dir / SIMULATE_SUMMARY).exists():
        sim_doc = _load_json(run_dir / SIMULATE_SUMMARY)
    if solve_doc or sim_doc:
        # Multiple prompt lengths yield several simulate rows per cell;
        # aggregate with mean divergence and peak realized bytes.
        sim_by_key: dict[tuple, dict] = {}
        if sim_doc:
            for r in sim_doc.get("rows", []):
                agg = sim_by_key.setdefault((r["policy"], r["b"]),
                                            {"kl": [], "realized": []})
                agg["kl"].append(r.get("mean_kl"))
                agg["realized"].append(r.get("realized_bytes"))
        source = (solve_doc or sim_doc).get("rows", [])
        seen = set()
        for r in source:
            key = (r["policy"], r.get("b"))
            if key in seen:
                continue
            seen.add(key)
            sim = sim_by_key.get(key, {})
            kls = [v for v in sim.get("kl", []) if v is not None]
            realized = [v for v in sim.get("realized", []) if v is not None]
            mem_rows.append({
                "policy": r["policy"],
                "b": r.get("b"),
                "M_bytes": r.get("M_bytes"),
                "predicted_bytes": r.get("predicted_bytes", r.get("M_bytes")),
                "s_pred": r.get("s_pred"),
                "realized_bytes": max(realized) if realized else r.get("realized_bytes"),
                "mean_kl": (sum(kls) / len(kls)) if kls else r.get("mean_kl"),
                "feasible": r.get("feasible", True),
            })
        mem_rows.sort(key=lambda r: (str(r["policy"]), r["b"] if r["b"] is not None else -1))
        rows = [[r["policy"], r["b"], r["M_bytes"], r["predicted_bytes"], r["s_pred"],
                 r["realized_bytes"], r["mean_kl"], r["feasible"]] for r in mem_rows]
        lines += ["## Memory and divergence by policy and budget", ""]
        lines += _md_table(
            ["policy", "b", "budget bytes", "predicted bytes", "predicted sensitivity",
             "realized bytes", "mean KL", "feasible"], rows)
        lines.append("")
        _write_csv(out_dir / "report_memory.csv",
                   ["policy", "b", "M_bytes", "predicted_bytes", "s_pred",
                    "realized_bytes", "mean_kl", "feasible"], rows)
        if figures:
            fig_dir.mkdir(exist_ok=True)
            plots.save_memory_fig(mem_rows, fig_dir / "memory.png")
            lines += ["![memory](figures/memory.png)", ""]
        sections["memory"] = True

    # -- 3. ablation deltas --------------------------------------------------
    metric_rows = [r for r in mem_rows if r.get("mean_kl") is not None]
    metric_name = "mean_kl"
    if not metric_rows:
        metric_rows = [r for r in mem_rows if r.get("s_pred") is not None]
        metric_name = "s_pred"
    by_budget: dict[int, dict[str, float]] = {}
    for r in metric_rows:
        if r.get("b") is None:
            continue
        by_budget.setdefault(r["b"], {})[r["policy"]] = r[metric_name]
    ab_rows = []
    for b in sorted(by_budget):
        values = by_budget[b]
        try:
            deltas = ablation_deltas(values)
        except InputError:
            continue
        ab_rows.append({"b": b, "metric": metric_name, **deltas})
    if ab_rows:
        rows = [[r["b"], r["metric"], r["delta_quant"], r["delta_evict"]] for r in ab_rows]
        lines += ["## Routing ablation deltas", "",
                  "delta_quant = 2d - 2d_uniform (per-layer quant routing); "
                  "delta_evict = 2d_hetero - 2d (per-layer evict routing).", ""]
        lines += _md_table(["b", "metric", "delta_quant", "delta_evict"], rows)
        lines.append("")
        _write_csv(out_dir / "report_ablation.csv",
                   ["b", "metric", "delta_quant", "delta_evict"], rows)
        if figures:
            fig_dir.mkdir(exist_ok=True)
            plots.save_ablation_fig(ab_rows, fig_dir / "ablation.png")
            lines += ["![ablation](figures/ablation.png)", ""]
        sections["ablation"] = True

    # -- 4. correlation summary ----------------------------------------------
    if (run_dir / CORRELATION).exists():
        corr = _load_json(run_dir / CORRELATION)
        per_p = corr["per_layer_pearson"]
        per_s = corr["per_layer_spearman"]
        rows = [[i, p, s] for i, (p, s) in enumerate(zip(per_p, per_s))]
        lines += ["## Proxy vs KL correlation", ""]
        lines += _md_table(["layer", "pearson", "spearman"], rows)
        lines += ["",
                  f"Mean Pearson: {_fmt(corr.get('mean_pearson'))}; "
                  f"mean Spearman: {_fmt(corr.get('mean_spearman'))}.", ""]
        _write_csv(out_dir / "report_correlation.csv",
                   ["layer", "pearson", "spearman"], rows)
        if figures:
            fig_dir.mkdir(exist_ok=True)
            plots.save_correlation_fig(per_p, per_s, fig_dir / "correlation.png")
            lines += ["![correlation](figures/correlation.png)", ""]
        sections["correlation"] = True

    if not sections:
        raise InputError(f"no report inputs found under {run_dir}")
    (out_dir / "report.md").write_text("\n".join(lines), encoding="utf-8")
    return sections
