import json
from pathlib import Path

import numpy as np
import pytest

import kvrouter as kr
from kvrouter.cli import EXIT_CONFIG, EXIT_FORMAT, EXIT_INFEASIBLE, EXIT_IO, main

SMALL_SPEC = {
    "num_layers": 4, "num_q_heads": 4, "num_kv_heads": 2, "head_dim": 8,
    "vocab_size": 64, "seed": 9, "rope_base": 10000.0,
}


@pytest.fixture()
def spec_file(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(SMALL_SPEC))
    return path


@pytest.fixture()
def pipeline_dir(tmp_path, spec_file):
    """calibrate -> solve -> simulate on a small 4-layer model."""
    out = tmp_path / "run"
    assert main(["calibrate", "--model-spec", str(spec_file), "--out", str(out),
                 "--seed", "3",
                 "--validate-kl", "--kl-sequences", "2", "--kl-tokens", "24"]) == 0
    assert main(["solve", "--model-spec", str(spec_file), "--out", str(out),
                 "--table", str(out / "sensitivity_l2.json"),
                 "--t-cache", "64", "--budgets", "8,16,32", "--oracle-check"]) == 0
    assert main(["simulate", "--model-spec", str(spec_file), "--out", str(out),
                 "--prompt-lens", "12", "--steps", "8", "--eviction-period", "16"]) == 0
    return out


def test_calibrate_default_space_has_54_columns(tmp_path, spec_file):
    out = tmp_path / "cal"
    assert main(["calibrate", "--model-spec", str(spec_file),
                 "--out", str(out), "--seed", "1"]) == 0
    table = kr.load_table(out / "sensitivity_l2.json")
    assert len(table.space) == 54
    assert np.all(table.scores[:, table.space.identity_id] == 0.0)
    assert (out / "sensitivity_l2.csv").exists()


def test_calibrate_table2_space_covers_nine_ops(tmp_path, spec_file):
    out = tmp_path / "cal2"
    assert main(["calibrate", "--model-spec", str(spec_file), "--out", str(out),
                 "--seed", "1", "--space", "table2"]) == 0
    table = kr.load_table(out / "sensitivity_l2.json")
    ops = {r["op"] for r in kr.heterogeneity_stats(table)}
    assert len(ops) == 9 and "evict_90" in ops and "v_quant_4" in ops


def test_pipeline_artifacts(pipeline_dir):
    out = pipeline_dir
    for name in ("sensitivity_l2.json", "sensitivity_kl.json", "correlation.json",
                 "solve_summary.json", "solve_summary.csv",
                 "simulate_summary.json", "simulate_summary.csv"):
        assert (out / name).exists(), name
    plans = sorted((out / "plans").glob("plan_*.json"))
    assert len(plans) == 12  # 4 policies x 3 budgets
    traces = sorted((out / "traces").glob("trace_*.json"))
    assert len(traces) == 12
    trace = json.loads(traces[0].read_text())
    snap = trace["final_cache"]  # per-layer cache diagnostic rides along
    assert len(snap["layers"]) == 4
    assert all("positions" in layer and "payload_bytes" in layer
               for layer in snap["layers"])
    corr = json.loads((out / "correlation.json").read_text())
    for coeff in corr["per_layer_pearson"] + corr["per_layer_spearman"]:
        assert coeff is None or -1.0 <= coeff <= 1.0
    solve = json.loads((out / "solve_summary.json").read_text())
    oracle_rows = [r for r in solve["rows"] if "s_oracle" in r]
    assert oracle_rows, "oracle check produced no rows on a 4-layer model"
    assert all(r["s_oracle"] <= r["s_pred"] + 1e-12 for r in oracle_rows)


def test_report_from_pipeline(pipeline_dir):
    assert main(["report", "--run-dir", str(pipeline_dir)]) == 0
    md = pipeline_dir / "report.md"
    assert md.exists()
    text = md.read_text()
    for heading in ("sensitivity spread", "Memory and divergence",
                    "ablation deltas", "correlation"):
        assert heading in text
    for fig in ("heterogeneity.png", "memory.png", "ablation.png", "correlation.png"):
        assert (pipeline_dir / "figures" / fig).exists()
    first = md.read_bytes()
    assert main(["report", "--run-dir", str(pipeline_dir)]) == 0
    assert md.read_bytes() == first  # deterministic rerun


def test_simulate_identity_plan_zero_divergence(tmp_path, spec_file, pipeline_dir):
    out = tmp_path / "full_run"
    assert main(["solve", "--model-spec", str(spec_file), "--out", str(out),
                 "--table", str(pipeline_dir / "sensitivity_l2.json"),
                 "--t-cache", "64", "--budgets", "64", "--policies", "full"]) == 0
    assert main(["simulate", "--model-spec", str(spec_file), "--out", str(out),
                 "--prompt-lens", "10", "--steps", "6"]) == 0
    rows = json.loads((out / "simulate_summary.json").read_text())["rows"]
    assert len(rows) == 1
    assert rows[0]["mean_kl"] < 1e-10
    assert rows[0]["first_divergence"] == 6


def test_exit_codes(tmp_path, spec_file, pipeline_dir):
    # configuration error: unknown policy
    assert main(["solve", "--model-spec", str(spec_file), "--out", str(tmp_path / "x"),
                 "--table", str(pipeline_dir / "sensitivity_l2.json"),
                 "--policies", "3d"]) == EXIT_CONFIG
    # infeasibility: every cell infeasible
    assert main(["solve", "--model-spec", str(spec_file), "--out", str(tmp_path / "y"),
                 "--table", str(pipeline_dir / "sensitivity_l2.json"),
                 "--t-cache", "4096", "--budgets", "1", "--policies", "1d"]) == EXIT_INFEASIBLE
    # io error: missing plan file
    assert main(["simulate", "--model-spec", str(spec_file), "--out", str(tmp_path / "z"),
                 "--plans", str(tmp_path / "nope" / "plan.json")]) == EXIT_IO
    # format error: table calibrated for another model
    other = tmp_path / "other_spec.json"
    other.write_text(json.dumps({**SMALL_SPEC, "seed": 77}))
    assert main(["solve", "--model-spec", str(other), "--out", str(tmp_path / "w"),
                 "--table", str(pipeline_dir / "sensitivity_l2.json")]) == EXIT_FORMAT
    # format error: corrupt table file
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    assert main(["solve", "--model-spec", str(spec_file), "--out", str(tmp_path / "v"),
                 "--table", str(bad)]) == EXIT_FORMAT


def test_config_file_with_flag_override(tmp_path, spec_file):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({
        "model_spec": str(spec_file),
        "out": str(tmp_path / "from_config"),
        "seed": 4,
        "space": "table2",
    }))
    # config supplies everything
    assert main(["calibrate", "--config", str(cfg)]) == 0
    table = kr.load_table(tmp_path / "from_config" / "sensitivity_l2.json")
    assert table.space.name == "table2" and table.seed == 4
    # explicit flag beats the config value
    assert main(["calibrate", "--config", str(cfg), "--space", "calib11",
                 "--out", str(tmp_path / "override")]) == 0
    table = kr.load_table(tmp_path / "override" / "sensitivity_l2.json")
    assert table.space.name == "calib11"


def test_inline_model_spec_in_config(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({
        "model_spec": SMALL_SPEC,
        "out": str(tmp_path / "inline"),
        "space": "table2",
    }))
    assert main(["calibrate", "--config", str(cfg)]) == 0
    assert (tmp_path / "inline" / "sensitivity_l2.json").exists()


def test_report_on_empty_dir_is_config_error(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["report", "--run-dir", str(empty)]) == EXIT_CONFIG


def test_desk_sweep_within_time_budget(tmp_path):
    # Full desk pipeline (4 policies x 4 budgets, 32-step decodes) must stay
    # far inside the five-minute envelope.
    import time

    out = tmp_path / "desk"
    t0 = time.time()
    assert main(["calibrate", "--out", str(out), "--seed", "5"]) == 0
    assert main(["solve", "--out", str(out), "--t-cache", "128",
                 "--budgets", "16,32,64,128"]) == 0
    assert main(["simulate", "--out", str(out), "--prompt-lens", "64",
                 "--steps", "32", "--eviction-period", "64"]) == 0
    assert main(["report", "--run-dir", str(out)]) == 0
    elapsed = time.time() - t0
    assert elapsed < 300.0, f"desk sweep took {elapsed:.0f}s"
    rows = json.loads((out / "simulate_summary.json").read_text())["rows"]
    assert len(rows) == 16
    budgets = sorted({r["b"] for r in rows})
    assert budgets == [16, 32, 64, 128]
