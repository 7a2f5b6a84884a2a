import json
import math

import numpy as np
import pytest

import kvrouter as kr
from kvrouter.calibration import (
    IDENTITY_TOLERANCE,
    _derive_seed,
    export_table_csv,
    kl_from_logits,
)
from kvrouter.errors import FormatError, InputError, StaleCalibrationError
from conftest import synthetic_table


# --------------------------------------------------------------------------
# L2 proxy
# --------------------------------------------------------------------------

def test_identity_column_exactly_zero(desk_l2_table, full_space):
    assert np.all(desk_l2_table.scores[:, full_space.identity_id] == 0.0)


def test_all_cells_finite_nonnegative(desk_l2_table):
    assert np.all(np.isfinite(desk_l2_table.scores))
    assert np.all(desk_l2_table.scores >= 0.0)


def test_l2_cell_matches_independent_recomputation(desk_model, calib11):
    # Recompute one cell from raw activations outside the calibration path.
    table = kr.calibrate_l2(desk_model, kr.CALIBRATION_PROMPT, calib11, seed=7)
    cfg = kr.LayerCompressionConfig(0.5, 16, 16)
    layer = 0
    full = kr.forward_full(desk_model, kr.CALIBRATION_PROMPT)
    pert = kr.forward_with_layer_perturbation(
        desk_model, kr.CALIBRATION_PROMPT, layer, cfg,
        scorer_seed=_derive_seed(7, layer), scorer="random_perm")
    ratios = []
    for t in range(len(kr.CALIBRATION_PROMPT)):
        a = full.attn_outputs[layer][t].astype(np.float64)
        b = pert.attn_outputs[layer][t].astype(np.float64)
        ratios.append(np.linalg.norm(b - a) / np.linalg.norm(a))
    want = float(np.mean(ratios))
    got = float(table.column(cfg)[layer])
    assert got == pytest.approx(want, rel=1e-12)
    assert got > 0.0


def test_l2_deterministic_and_parallel_identical(desk_model, calib11):
    serial = kr.calibrate_l2(desk_model, kr.CALIBRATION_PROMPT, calib11, seed=3)
    parallel = kr.calibrate_l2(desk_model, kr.CALIBRATION_PROMPT, calib11, seed=3, workers=4)
    again = kr.calibrate_l2(desk_model, kr.CALIBRATION_PROMPT, calib11, seed=3)
    assert np.array_equal(serial.scores, parallel.scores)
    assert np.array_equal(serial.scores, again.scores)


def test_short_prompt_rejected(desk_model, calib11):
    with pytest.raises(InputError):
        kr.calibrate_l2(desk_model, [1], calib11, seed=0)


def test_zero_norm_reference_guard():
    from kvrouter.calibration import _relative_l2
    from kvrouter.errors import CalibrationError

    ref = np.zeros((3, 4), dtype=np.float32)
    ref[1] = 1.0
    pert = ref.copy()
    # zero-norm positions with zero difference contribute zero
    assert _relative_l2(ref, pert) == 0.0
    pert[0, 0] = 0.5  # non-zero perturbation against a zero-norm reference
    with pytest.raises(CalibrationError):
        _relative_l2(ref, pert)


# --------------------------------------------------------------------------
# KL kernel and KL calibration
# --------------------------------------------------------------------------

def test_kl_closed_form():
    assert kr.kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), rel=1e-12)
    assert kr.kl_divergence([0.25, 0.75], [0.25, 0.75]) == 0.0
    assert kr.kl_divergence([1.0, 0.0], [0.0, 1.0]) == float("inf")


def test_kl_from_logits_agrees_with_prob_kernel():
    rng = np.random.Generator(np.random.PCG64(1))
    p_logits, q_logits = rng.normal(size=(2, 12))
    softmax = lambda z: np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    want = kr.kl_divergence(softmax(p_logits), softmax(q_logits))
    got = float(kl_from_logits(p_logits, q_logits)[0])
    assert got == pytest.approx(want, rel=1e-9)
    assert float(kl_from_logits(p_logits, p_logits)[0]) == 0.0


def test_kl_table_finite_nonnegative_identity_zero(desk_model, calib11):
    heldout = kr.make_heldout_sequences(desk_model.spec.vocab_size, 2, 32, seed=5)
    table = kr.calibrate_kl(desk_model, heldout, calib11, seed=5)
    assert np.all(np.isfinite(table.scores))
    assert np.all(table.scores >= 0.0)
    assert np.all(table.scores[:, calib11.identity_id] <= IDENTITY_TOLERANCE)
    assert table.metric == "kl"


# --------------------------------------------------------------------------
# Correlation
# --------------------------------------------------------------------------

def test_self_correlation_is_one(calib11):
    table = synthetic_table(calib11, num_layers=4, seed=0)
    report = kr.correlate(table, table)
    assert all(p == pytest.approx(1.0) for p in report.per_layer_pearson)
    assert all(s == pytest.approx(1.0) for s in report.per_layer_spearman)


def test_monotone_transform_preserves_spearman(calib11):
    table = synthetic_table(calib11, num_layers=4, seed=1)
    squared = kr.SensitivityTable(
        scores=table.scores**2, space=calib11, model_spec_hash=table.model_spec_hash,
        prompt_id="sq", metric="kl", scorer=table.scorer, seed=1)
    report = kr.correlate(table, squared)
    assert all(s == pytest.approx(1.0) for s in report.per_layer_spearman)


def test_constant_rows_yield_undefined_marker(calib11):
    table = synthetic_table(calib11, num_layers=3, seed=2)
    flat_scores = table.scores.copy()
    flat_scores[1, :] = 0.5
    flat_scores[1, calib11.identity_id] = 0.0
    flat = kr.SensitivityTable(flat_scores, calib11, table.model_spec_hash,
                               "flat", "l2_proxy", "random_perm", 2)
    report = kr.correlate(flat, table)
    assert report.per_layer_pearson[1] is None
    assert report.per_layer_pearson[0] is not None
    assert report.per_config_pearson[calib11.identity_id] is None
    assert report.mean_pearson is not None


def test_shape_mismatch_rejected(calib11, full_space):
    a = synthetic_table(calib11, num_layers=3, seed=3)
    b = synthetic_table(full_space, num_layers=3, seed=3)
    with pytest.raises(InputError):
        kr.correlate(a, b)


def test_coefficients_in_range(desk_model, calib11):
    l2 = kr.calibrate_l2(desk_model, kr.CALIBRATION_PROMPT, calib11, seed=9)
    heldout = kr.make_heldout_sequences(desk_model.spec.vocab_size, 2, 32, seed=9)
    kl = kr.calibrate_kl(desk_model, heldout, calib11, seed=9)
    report = kr.correlate(l2, kl)
    for coeff in (report.per_layer_pearson + report.per_layer_spearman
                  + report.per_config_pearson):
        assert coeff is None or -1.0 <= coeff <= 1.0


# --------------------------------------------------------------------------
# Heterogeneity stats
# --------------------------------------------------------------------------

def test_constant_column_ratio_one(calib11):
    table = synthetic_table(calib11, num_layers=4, seed=4)
    scores = table.scores.copy()
    cid = calib11.index_of(kr.LayerCompressionConfig(0.5, 16, 16))
    scores[:, cid] = 0.75
    fixed = kr.SensitivityTable(scores, calib11, table.model_spec_hash,
                                "c", "l2_proxy", "random_perm", 4)
    rows = {r["op"]: r for r in kr.heterogeneity_stats(fixed)}
    assert rows["evict_50"]["ratio"] == pytest.approx(1.0)
    assert rows["evict_50"]["min"] == rows["evict_50"]["max"] == 0.75


def test_zero_minimum_reports_infinity(calib11):
    table = synthetic_table(calib11, num_layers=4, seed=5)
    scores = table.scores.copy()
    cid = calib11.index_of(kr.LayerCompressionConfig(1.0, 16, 4))
    scores[0, cid] = 0.0
    patched = kr.SensitivityTable(scores, calib11, table.model_spec_hash,
                                  "z", "l2_proxy", "random_perm", 5)
    rows = {r["op"]: r for r in kr.heterogeneity_stats(patched)}
    assert rows["v_quant_4"]["ratio"] == float("inf")


def test_desk_stats_cover_nine_ops(desk_l2_table):
    rows = kr.heterogeneity_stats(desk_l2_table)
    ops = {r["op"] for r in rows}
    assert ops == {
        "evict_10", "evict_25", "evict_50", "evict_75", "evict_90",
        "k_quant_8", "k_quant_4", "v_quant_8", "v_quant_4",
    }
    assert all(r["ratio"] >= 1.0 for r in rows)


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

def test_save_load_round_trip(tmp_path, desk_l2_table):
    path = tmp_path / "table.json"
    kr.save_table(desk_l2_table, path)
    loaded = kr.load_table(path, expect_spec_hash=desk_l2_table.model_spec_hash)
    assert np.array_equal(loaded.scores, desk_l2_table.scores)
    assert loaded.space.configs == desk_l2_table.space.configs
    assert loaded.metric == desk_l2_table.metric
    assert loaded.seed == desk_l2_table.seed


def test_stale_hash_rejected(tmp_path, desk_l2_table):
    path = tmp_path / "table.json"
    kr.save_table(desk_l2_table, path)
    with pytest.raises(StaleCalibrationError):
        kr.load_table(path, expect_spec_hash="0" * 64)
    doc = json.loads(path.read_text())
    doc["model_spec_hash"] = "deadbeef" * 8
    path.write_text(json.dumps(doc))
    with pytest.raises(StaleCalibrationError):
        kr.load_table(path, expect_spec_hash=desk_l2_table.model_spec_hash)


def test_negative_score_file_rejected(tmp_path, desk_l2_table):
    path = tmp_path / "table.json"
    kr.save_table(desk_l2_table, path)
    doc = json.loads(path.read_text())
    doc["scores"][5] = -0.25
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        kr.load_table(path)


def test_malformed_json_rejected(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(FormatError):
        kr.load_table(path)


def test_csv_export_columns(tmp_path, calib11):
    table = synthetic_table(calib11, num_layers=2, seed=6)
    path = tmp_path / "table.csv"
    export_table_csv(table, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "layer,config_id,keep,k_bits,v_bits,score"
    assert len(lines) == 1 + 2 * len(calib11)
