import json
import math
from pathlib import Path

import numpy as np
import pytest

import kvrouter as kr
from kvrouter.errors import ConfigurationError, FormatError, InputError

GOLDEN_PATH = Path(__file__).parent / "data" / "golden_logits.json"
# First verified run of the desk spec on the pinned 27-token prompt.
GOLDEN_CHECKSUM = 123.74052750310875


def small_spec(**overrides):
    base = dict(num_layers=2, num_q_heads=2, num_kv_heads=2, head_dim=8,
                vocab_size=32, seed=5)
    base.update(overrides)
    return kr.ModelSpec(**base)


# --------------------------------------------------------------------------
# Spec validation and determinism
# --------------------------------------------------------------------------

def test_equal_specs_build_identical_models():
    a = kr.build_model(kr.ModelSpec(4, 4, 2, 16, 64, seed=7))
    b = kr.build_model(kr.ModelSpec(4, 4, 2, 16, 64, seed=7))
    assert np.array_equal(a.embedding, b.embedding)
    assert all(
        np.array_equal(la.wq, lb.wq) and np.array_equal(la.w_mlp_out, lb.w_mlp_out)
        for la, lb in zip(a.layers, b.layers)
    )
    assert a.embedding[0, 0] == b.embedding[0, 0]


def test_head_divisibility_enforced():
    with pytest.raises(ConfigurationError):
        kr.ModelSpec(2, 4, 3, 16, 64, seed=0)


def test_odd_head_dim_rejected():
    with pytest.raises(ConfigurationError):
        kr.ModelSpec(2, 4, 2, 15, 64, seed=0)


def test_hidden_dim_derived():
    spec = kr.ModelSpec(8, 4, 2, 16, 256, seed=42)
    assert spec.hidden_dim == 64


def test_spec_json_round_trip_and_hash():
    spec = kr.DESK_SPEC
    again = kr.ModelSpec.from_json(json.loads(json.dumps(spec.to_json())))
    assert again == spec
    assert again.spec_hash() == spec.spec_hash()
    assert kr.ModelSpec(8, 4, 2, 16, 256, seed=43).spec_hash() != spec.spec_hash()


def test_weights_frozen():
    model = kr.build_model(small_spec())
    with pytest.raises(ValueError):
        model.embedding[0, 0] = 1.0


# --------------------------------------------------------------------------
# Forward pass
# --------------------------------------------------------------------------

def test_forward_deterministic(desk_model):
    prompt = [1, 2, 3, 5, 8, 13]
    a = kr.forward_full(desk_model, prompt)
    b = kr.forward_full(desk_model, prompt)
    assert np.array_equal(a.logits, b.logits)
    assert all(np.array_equal(x, y) for x, y in zip(a.attn_outputs, b.attn_outputs))


def test_input_validation(desk_model):
    with pytest.raises(InputError):
        kr.forward_full(desk_model, [])
    with pytest.raises(InputError):
        kr.forward_full(desk_model, [0, 999])


def test_single_token_attention_is_value_projection():
    # Softmax over one position is 1, so the attention block output is the
    # token's value vector pushed through the output projection.
    model = kr.build_model(small_spec())
    acts = kr.forward_full(model, [3])
    h = kr.model.rms_norm(model.embedding[[3]])
    v = h @ model.layers[0].wv
    expected = v @ model.layers[0].wo
    assert np.abs(acts.attn_outputs[0] - expected).max() < 1e-6


def test_causality_brute_force(desk_model):
    base = [5, 9, 2, 7, 1, 30, 8, 4, 11]
    ref = kr.forward_full(desk_model, base).logits
    for t in range(3, len(base)):
        edited = list(base)
        edited[t] = (edited[t] + 13) % desk_model.spec.vocab_size
        got = kr.forward_full(desk_model, edited).logits
        # Masked-out future columns contribute exactly zero, so earlier rows
        # are bit-identical, not merely close.
        assert np.array_equal(got[:t], ref[:t])
        assert not np.array_equal(got[t:], ref[t:])


def rope_pair(x, position, base):
    out = np.empty_like(x)
    d = x.shape[-1]
    for i in range(d // 2):
        theta = position * base ** (-2.0 * i / d)
        c, s = math.cos(theta), math.sin(theta)
        out[2 * i] = x[2 * i] * c - x[2 * i + 1] * s
        out[2 * i + 1] = x[2 * i] * s + x[2 * i + 1] * c
    return out


def naive_forward(model, ids):
    """Loop-based plain multi-head reference (no einsum, no GQA expansion)."""
    spec = model.spec
    assert spec.num_q_heads == spec.num_kv_heads
    t, d = len(ids), spec.head_dim
    x = model.embedding[np.asarray(ids)].copy()
    for lw in model.layers:
        h = kr.model.rms_norm(x)
        q = (h @ lw.wq).reshape(t, spec.num_q_heads, d)
        k = (h @ lw.wk).reshape(t, spec.num_kv_heads, d)
        v = (h @ lw.wv).reshape(t, spec.num_kv_heads, d)
        attn = np.zeros((t, spec.num_q_heads, d), dtype=np.float32)
        for head in range(spec.num_q_heads):
            for qt in range(t):
                qv = rope_pair(q[qt, head], qt, spec.rope_base)
                scores = np.array([
                    float(np.dot(qv, rope_pair(k[s, head], s, spec.rope_base))) / math.sqrt(d)
                    for s in range(qt + 1)
                ])
                w = np.exp(scores - scores.max())
                w /= w.sum()
                attn[qt, head] = sum(w[s] * v[s, head] for s in range(qt + 1))
        x = x + attn.reshape(t, spec.hidden_dim) @ lw.wo
        x = x + kr.model.silu(kr.model.rms_norm(x) @ lw.w_mlp_in) @ lw.w_mlp_out
    return kr.model.rms_norm(x) @ model.unembedding


def test_matches_plain_multihead_reference():
    model = kr.build_model(small_spec(num_layers=2))
    ids = [1, 9, 4, 22, 17, 3, 8, 30, 12, 6]
    got = kr.forward_full(model, ids).logits
    want = naive_forward(model, ids)
    assert np.abs(got - want).max() < 1e-6


# --------------------------------------------------------------------------
# Golden regression
# --------------------------------------------------------------------------

def test_golden_logits_file(desk_model):
    doc = kr.model.verify_golden_logits(GOLDEN_PATH, desk_model)
    assert abs(doc["logits_checksum"] - GOLDEN_CHECKSUM) < 5e-4


def test_golden_write_and_detect_drift(tmp_path, desk_model):
    path = tmp_path / "golden.json"
    kr.model.write_golden_logits(path, desk_model, kr.CALIBRATION_PROMPT)
    kr.model.verify_golden_logits(path, desk_model)
    doc = json.loads(path.read_text())
    doc["logits_checksum"] += 1.0
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        kr.model.verify_golden_logits(path, desk_model)


# --------------------------------------------------------------------------
# Layer perturbation
# --------------------------------------------------------------------------

def test_identity_config_is_bit_identical(desk_model):
    full = kr.forward_full(desk_model, kr.CALIBRATION_PROMPT)
    pert = kr.forward_with_layer_perturbation(
        desk_model, kr.CALIBRATION_PROMPT, 3, kr.IDENTITY_CONFIG, scorer_seed=11)
    assert np.array_equal(full.logits, pert.logits)
    assert all(np.array_equal(a, b) for a, b in zip(full.attn_outputs, pert.attn_outputs))


def test_perturbation_propagates_downstream(desk_model):
    full = kr.forward_full(desk_model, kr.CALIBRATION_PROMPT)
    pert = kr.forward_with_layer_perturbation(
        desk_model, kr.CALIBRATION_PROMPT, 0,
        kr.LayerCompressionConfig(0.5, 16, 16), scorer_seed=11)
    for layer in range(desk_model.spec.num_layers):
        assert np.abs(full.attn_outputs[layer] - pert.attn_outputs[layer]).max() > 1e-6


def test_perturbation_layer_bounds(desk_model):
    with pytest.raises(InputError):
        kr.forward_with_layer_perturbation(
            desk_model, [1, 2, 3], 99, kr.IDENTITY_CONFIG, scorer_seed=0)


@pytest.mark.parametrize("scorer", ["random_perm", "attn_accum", "trig"])
def test_perturbation_scorers_run(desk_model, scorer):
    cfg = kr.LayerCompressionConfig(0.25, 8, 4)
    acts = kr.forward_with_layer_perturbation(
        desk_model, kr.CALIBRATION_PROMPT, 2, cfg, scorer_seed=3, scorer=scorer)
    assert np.all(np.isfinite(acts.logits))
