"""Command-line front end: calibrate -> solve -> simulate -> report.

Every command is deterministic given its flags and seeds. Options may also
come from a declarative JSON run file (``--config``); explicit flags win.
Exit codes: 0 success, 2 configuration/input problems, 3 infeasible budget,
4 I/O failures, 5 malformed artifacts.
"""

from __future__ import annotations

import argparse
import glob
import json
import sys
import time
from pathlib import Path

import numpy as np

from .calibration import (
    calibrate_kl,
    calibrate_l2,
    correlate,
    export_table_csv,
    load_table,
    make_heldout_sequences,
    save_table,
)
from .config import SPACE_NAMES, space_by_name
from .decode import decode, memory_report, write_report_csv, write_report_json
from .errors import (
    ConfigurationError,
    FormatError,
    InfeasibleBudgetError,
    InputError,
    KvRouterError,
)
from .eviction import SCORER_NAMES
from .model import CALIBRATION_PROMPT, DESK_SPEC, ModelSpec, build_model
from .report import build_report
from .solver import (
    POLICIES,
    PlanningDims,
    ablation_deltas,
    budget_from_tokens,
    load_plan,
    save_plan,
    solve_greedy,
    solve_oracle,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4
EXIT_FORMAT = 5


class _Options:
    """Flag values with config-file fallback; explicit flags win."""

    def __init__(self, args: argparse.Namespace):
        self._args = vars(args)
        self._config = {}
        cfg_path = self._args.get("config")
        if cfg_path:
            try:
                self._config = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise FormatError(f"run config is not valid JSON: {exc}") from exc
            if not isinstance(self._config, dict):
                raise FormatError("run config must be a JSON object")

    def get(self, key: str, default=None):
        value = self._args.get(key)
        if value is not None:
            return value
        if key in self._config:
            return self._config[key]
        return default


def _load_model_spec(opts: _Options) -> ModelSpec:
    raw = opts.get("model_spec")
    if raw is None:
        return DESK_SPEC
    if isinstance(raw, dict):  # inline spec in the run config
        return ModelSpec.from_json(raw)
    try:
        doc = json.loads(Path(raw).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"model spec file is not valid JSON: {exc}") from exc
    return ModelSpec.from_json(doc)


def _parse_list(value, kind=int) -> list:
    if isinstance(value, (list, tuple)):
        return [kind(v) for v in value]
    return [kind(v.strip()) for v in str(value).split(",") if v.strip()]


def _out_dir(opts: _Options) -> Path:
    out = Path(opts.get("out", "kvrouter_run"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_choice(value: str, allowed, what: str) -> str:
    if value not in allowed:
        raise ConfigurationError(f"unknown {what} {value!r}; expected one of {tuple(allowed)}")
    return value


# --------------------------------------------------------------------------
# calibrate
# --------------------------------------------------------------------------

def cmd_calibrate(opts: _Options) -> int:
    spec = _load_model_spec(opts)
    model = build_model(spec)
    out = _out_dir(opts)
    seed = int(opts.get("seed", 0))
    scorer = _check_choice(opts.get("scorer", "random_perm"), SCORER_NAMES, "scorer")
    metric = _check_choice(opts.get("metric", "l2"), ("l2", "kl"), "metric")
    space = space_by_name(_check_choice(opts.get("space", "full"), SPACE_NAMES, "space"))
    workers = int(opts.get("workers", 1))

    def kl_table():
        heldout = make_heldout_sequences(
            spec.vocab_size, int(opts.get("kl_sequences", 8)),
            int(opts.get("kl_tokens", 256)), seed,
        )
        return calibrate_kl(model, heldout, space, seed, scorer=scorer, workers=workers)

    # The pinned prompt is defined over a 256-token vocabulary; fold it into
    # smaller vocabs so any valid spec can calibrate.
    prompt = [t % spec.vocab_size for t in CALIBRATION_PROMPT]

    if metric == "l2":
        primary = calibrate_l2(model, prompt, space, seed,
                               scorer=scorer, workers=workers)
        name = "sensitivity_l2"
    else:
        primary = kl_table()
        name = "sensitivity_kl"
    save_table(primary, out / f"{name}.json")
    export_table_csv(primary, out / f"{name}.csv")
    print(f"wrote {out / (name + '.json')} ({primary.num_layers} layers x {len(primary.space)} configs)")

    if opts.get("validate_kl", False) and metric == "l2":
        kl = kl_table()
        save_table(kl, out / "sensitivity_kl.json")
        export_table_csv(kl, out / "sensitivity_kl.csv")
        report = correlate(primary, kl)
        with open(out / "correlation.json", "w", encoding="utf-8") as fh:
            json.dump(report.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"wrote {out / 'sensitivity_kl.json'} and {out / 'correlation.json'} "
              f"(mean pearson {report.mean_pearson}, mean spearman {report.mean_spearman})")
    return EXIT_OK


# --------------------------------------------------------------------------
# solve
# --------------------------------------------------------------------------

def cmd_solve(opts: _Options) -> int:
    spec = _load_model_spec(opts)
    out = _out_dir(opts)
    table_path = opts.get("table", str(out / "sensitivity_l2.json"))
    table = load_table(table_path, expect_spec_hash=spec.spec_hash())
    budgets = _parse_list(opts.get("budgets", "64,128,256,512"))
    policies = _parse_list(opts.get("policies", "1d,2d_uniform,2d,2d_hetero"), kind=str)
    for p in policies:
        _check_choice(p, POLICIES, "policy")
    dims = PlanningDims(
        num_layers=spec.num_layers, num_kv_heads=spec.num_kv_heads,
        head_dim=spec.head_dim, t_cache=int(opts.get("t_cache", 512)),
    )
    oracle_check = bool(opts.get("oracle_check", False))
    plan_dir = out / "plans"
    plan_dir.mkdir(exist_ok=True)

    rows = []
    n_feasible = 0
    for policy in policies:
        for b in budgets:
            budget = budget_from_tokens(b, policy, dims)
            row = {"policy": policy, "b": b, "M_bytes": budget.bytes}
            try:
                t0 = time.perf_counter()
                plan = solve_greedy(table, budget, policy, dims)
                row.update({
                    "predicted_bytes": plan.total_m_bytes,
                    "s_pred": plan.total_s_pred,
                    "feasible": True,
                    "solve_ms": (time.perf_counter() - t0) * 1e3,
                })
                path = plan_dir / f"plan_{policy}_b{b}.json"
                save_plan(plan, path)
                row["plan_path"] = str(path)
                n_feasible += 1
                if oracle_check and dims.num_layers <= 4:
                    oracle = solve_oracle(table, budget, policy, dims, pareto_first=True)
                    row["s_oracle"] = oracle.total_s_pred
                    row["greedy_over_oracle"] = (
                        plan.total_s_pred / oracle.total_s_pred
                        if oracle.total_s_pred > 0 else 1.0
                    )
            except InfeasibleBudgetError as exc:
                row.update({"feasible": False, "deficit_bytes": exc.deficit_bytes})
            rows.append(row)

    with open(out / "solve_summary.json", "w", encoding="utf-8") as fh:
        json.dump({"format_version": 1, "t_cache": dims.t_cache, "rows": rows},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "solve_summary.csv", "w", encoding="utf-8") as fh:
        cols = ["policy", "b", "M_bytes", "predicted_bytes", "s_pred", "feasible"]
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(str(r.get(c, "")) for c in cols) + "\n")
    print(f"solved {n_feasible}/{len(rows)} (policy, budget) cells -> {plan_dir}")
    if n_feasible == 0:
        raise InfeasibleBudgetError(
            max(r.get("deficit_bytes", 0.0) for r in rows),
            "every (policy, budget) cell is infeasible",
        )
    return EXIT_OK


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------

def _plan_paths(opts: _Options, out: Path) -> list[Path]:
    raw = opts.get("plans", str(out / "plans"))
    if isinstance(raw, (list, tuple)):
        paths = [Path(p) for p in raw]
    else:
        p = Path(raw)
        if p.is_dir():
            paths = sorted(p.glob("plan_*.json"))
        else:
            paths = [Path(m) for m in sorted(glob.glob(str(raw)))] or [p]
    if not paths:
        raise InputError(f"no plan files found under {raw!r}")
    for path in paths:
        if not path.exists():
            raise FileNotFoundError(f"plan file not found: {path}")
    return paths


def cmd_simulate(opts: _Options) -> int:
    spec = _load_model_spec(opts)
    model = build_model(spec)
    out = _out_dir(opts)
    plan_paths = _plan_paths(opts, out)
    # Short and long prompt regimes by default; 128 steps so the default
    # eviction trigger fires mid-decode in the short regime.
    prompt_lens = _parse_list(opts.get("prompt_lens", "64,256"))
    steps = int(opts.get("steps", 128))
    scorer = _check_choice(opts.get("scorer", "attn_accum"), SCORER_NAMES, "scorer")
    seed = int(opts.get("seed", 0))
    period = int(opts.get("eviction_period", 128))
    group_size = int(opts.get("group_size", 32))
    trace_dir = out / "traces"
    trace_dir.mkdir(exist_ok=True)

    traces = []
    for path in plan_paths:
        plan = load_plan(path)
        for plen in prompt_lens:
            rng = np.random.Generator(np.random.PCG64(seed * 31 + plen))
            prompt = list(map(int, rng.integers(0, spec.vocab_size, size=plen)))
            trace = decode(model, prompt, plan, steps, scorer=scorer, seed=seed,
                           eviction_period=period, group_size=group_size)
            traces.append(trace)
            tname = f"trace_{plan.policy}_b{plan.budget.nominal_tokens}_p{plen}.json"
            with open(trace_dir / tname, "w", encoding="utf-8") as fh:
                json.dump(trace.to_json(), fh, indent=2, sort_keys=True)
                fh.write("\n")

    rows = memory_report(traces)
    write_report_csv(rows, out / "simulate_summary.csv")
    ablation = _simulate_ablation(rows)
    write_report_json(rows, out / "simulate_summary.json",
                      extra={"prompt_lens": prompt_lens, "steps": steps,
                             "ablation": ablation})
    print(f"simulated {len(traces)} (plan, prompt) decodes -> {out / 'simulate_summary.csv'}")
    return EXIT_OK


def _simulate_ablation(rows: list[dict]) -> list[dict]:
    acc: dict[int, dict[str, list[float]]] = {}
    for r in rows:
        if r["b"] is not None:
            acc.setdefault(r["b"], {}).setdefault(r["policy"], []).append(r["mean_kl"])
    out = []
    for b in sorted(acc):
        means = {policy: sum(v) / len(v) for policy, v in acc[b].items()}
        try:
            out.append({"b": b, "metric": "mean_kl", **ablation_deltas(means)})
        except InputError:
            continue
    return out


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

def cmd_report(opts: _Options) -> int:
    run_dir = Path(opts.get("run_dir", opts.get("out", "kvrouter_run")))
    if not run_dir.exists():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    out = Path(opts.get("out")) if opts.get("out") else run_dir
    sections = build_report(run_dir, out, figures=not opts.get("no_figures", False))
    print(f"wrote {out / 'report.md'} with sections: {', '.join(sorted(sections))}")
    return EXIT_OK


# --------------------------------------------------------------------------
# wiring
# --------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="declarative JSON run file; explicit flags win")
    p.add_argument("--model-spec", dest="model_spec", help="model spec JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default kvrouter_run)")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvrouter",
        description="Per-layer KV-cache compression routing on a deterministic toy model",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="build per-layer sensitivity table(s)")
    _add_common(p)
    p.add_argument("--space", choices=SPACE_NAMES)
    p.add_argument("--scorer", choices=SCORER_NAMES)
    p.add_argument("--metric", choices=("l2", "kl"))
    p.add_argument("--validate-kl", dest="validate_kl", action="store_true", default=None,
                   help="also build the KL table and the proxy-correlation report")
    p.add_argument("--workers", type=int)
    p.add_argument("--kl-sequences", dest="kl_sequences", type=int)
    p.add_argument("--kl-tokens", dest="kl_tokens", type=int)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("solve", help="route layers under token budgets")
    _add_common(p)
    p.add_argument("--table", help="sensitivity table JSON (default <out>/sensitivity_l2.json)")
    p.add_argument("--budgets", help="comma-separated nominal token budgets")
    p.add_argument("--policies", help=f"comma-separated subset of {POLICIES}")
    p.add_argument("--t-cache", dest="t_cache", type=int,
                   help="cache length the solver plans for (default 512)")
    p.add_argument("--oracle-check", dest="oracle_check", action="store_true", default=None,
                   help="verify greedy against the exhaustive oracle (small models only)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("simulate", help="decode under routing plans and trace divergence")
    _add_common(p)
    p.add_argument("--plans", help="plan directory, glob, or file (default <out>/plans)")
    p.add_argument("--prompt-lens", dest="prompt_lens", help="comma-separated prompt lengths")
    p.add_argument("--steps", type=int)
    p.add_argument("--scorer", choices=SCORER_NAMES)
    p.add_argument("--eviction-period", dest="eviction_period", type=int,
                   help="eviction trigger period in steps (default 128)")
    p.add_argument("--group-size", dest="group_size", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="consolidated markdown/CSV/figure report")
    _add_common(p)
    p.add_argument("--run-dir", dest="run_dir", help="directory holding prior outputs")
    p.add_argument("--no-figures", dest="no_figures", action="store_true", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        opts = _Options(args)
        return args.func(opts)
    except InfeasibleBudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (FormatError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ConfigurationError, InputError, KvRouterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
