"""Deterministic toy GQA transformer (forward pass only).

The model is the calibration target and decoding substrate: pre-norm blocks
of causal grouped-query attention plus a 2-layer SiLU MLP, rotary position
embeddings, untied embedding/unembedding, float32 throughout. There is no
tokenizer; prompts are integer sequences.

Weights come from a single seeded PCG64 generator, every matrix uniform in
[-1/sqrt(fan_in), +1/sqrt(fan_in)] with fan_in = input dimension, drawn in a
fixed documented order (see ``build_model``) so golden values survive
refactors. RMS norms carry no learned parameters. Two models built from equal
specs are bit-identical.

``forward_with_layer_perturbation`` reruns the same forward with exactly one
layer's K/V passed through the eviction + quantization pipeline before
attention: full-length K/V are scored, a retained set is chosen, K/V are
quantized at the layer's bit widths, and each query position attends over
retained positions at or before it plus its own position (the token being
processed is always present in a real cache at its own step). With the
identity config this path is bit-identical to the plain forward.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .config import LayerCompressionConfig
from .errors import ConfigurationError, FormatError, InputError, ShapeError
from .eviction import (
    score_attention_accumulation,
    score_random_permutation,
    score_trigonometric,
    select_retained,
)
from .quant import dequantize, quantize_k, quantize_v

GOLDEN_FORMAT_VERSION = 1

# Stand-in for a short natural-language calibration prompt: a pinned
# 27-token integer sequence (valid for any vocab >= 256).
CALIBRATION_PROMPT = (
    0, 178, 54, 80, 251, 31, 152, 82, 111, 238, 50, 202, 190, 2,
    231, 50, 81, 75, 251, 241, 76, 103, 165, 46, 100, 220, 1,
)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture + seed; equal specs produce bit-identical models."""

    num_layers: int
    num_q_heads: int
    num_kv_heads: int
    head_dim: int
    vocab_size: int
    seed: int
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("num_layers", "num_q_heads", "num_kv_heads", "head_dim", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.num_q_heads % self.num_kv_heads != 0:
            raise ConfigurationError(
                f"num_q_heads ({self.num_q_heads}) must be divisible by "
                f"num_kv_heads ({self.num_kv_heads})"
            )
        if self.head_dim % 2 != 0:
            raise ConfigurationError("head_dim must be even (rotary pairs dimensions)")
        if self.rope_base <= 0:
            raise ConfigurationError("rope_base must be positive")
        if not (0 <= self.seed < 2**64):
            raise ConfigurationError("seed must fit in 64 unsigned bits")

    @property
    def hidden_dim(self) -> int:
        return self.num_q_heads * self.head_dim

    @property
    def mlp_dim(self) -> int:
        return 4 * self.hidden_dim

    def to_json(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "num_q_heads": self.num_q_heads,
            "num_kv_heads": self.num_kv_heads,
            "head_dim": self.head_dim,
            "vocab_size": self.vocab_size,
            "seed": self.seed,
            "rope_base": self.rope_base,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelSpec":
        try:
            return cls(
                num_layers=int(obj["num_layers"]),
                num_q_heads=int(obj["num_q_heads"]),
                num_kv_heads=int(obj["num_kv_heads"]),
                head_dim=int(obj["head_dim"]),
                vocab_size=int(obj["vocab_size"]),
                seed=int(obj["seed"]),
                rope_base=float(obj.get("rope_base", 10000.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed model spec: {exc}") from exc

    def spec_hash(self) -> str:
        canon = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


# Default desk-scale spec used by the CLI and the test suite.
DESK_SPEC = ModelSpec(
    num_layers=8, num_q_heads=4, num_kv_heads=2, head_dim=16,
    vocab_size=256, seed=42,
)


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_mlp_in: np.ndarray
    w_mlp_out: np.ndarray


@dataclass
class ToyModel:
    spec: ModelSpec
    embedding: np.ndarray
    layers: list[LayerWeights]
    unembedding: np.ndarray

    def spec_hash(self) -> str:
        return self.spec.spec_hash()


@dataclass
class LayerActivations:
    """Per-layer attention-block outputs [T, hidden] and final logits [T, vocab]."""

    attn_outputs: list[np.ndarray] | None
    logits: np.ndarray


def build_model(spec: ModelSpec) -> ToyModel:
    """Materialize weights from the spec's seed.

    Draw order (one PCG64 stream, uniform in +/- 1/sqrt(fan_in), cast to
    float32): embedding [vocab, hidden]; then per layer wq [hidden, hidden],
    wk [hidden, kv*d], wv [hidden, kv*d], wo [hidden, hidden],
    w_mlp_in [hidden, 4*hidden], w_mlp_out [4*hidden, hidden]; finally the
    untied unembedding [hidden, vocab]. All arrays are frozen read-only.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    h, kv_dim = spec.hidden_dim, spec.num_kv_heads * spec.head_dim

    def draw(n_in: int, n_out: int, shape: tuple[int, int] | None = None) -> np.ndarray:
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=shape or (n_in, n_out)).astype(np.float32)
        w.setflags(write=False)
        return w

    # Embedding rows live in hidden space, so its fan_in is hidden_dim.
    embedding = draw(h, h, shape=(spec.vocab_size, h))
    layers = [
        LayerWeights(
            wq=draw(h, h),
            wk=draw(h, kv_dim),
            wv=draw(h, kv_dim),
            wo=draw(h, h),
            w_mlp_in=draw(h, spec.mlp_dim),
            w_mlp_out=draw(spec.mlp_dim, h),
        )
        for _ in range(spec.num_layers)
    ]
    unembedding = draw(h, spec.vocab_size)
    return ToyModel(spec, embedding, layers, unembedding)


# --------------------------------------------------------------------------
# Rotary position embedding (interleaved-pair formulation)
# --------------------------------------------------------------------------

def _rope_cos_sin(positions: np.ndarray, head_dim: int, base: float):
    """cos/sin tables [P, head_dim/2]; angle = position * base^(-2i/d)."""
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def _rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate dimension pairs (2i, 2i+1); cos/sin broadcast over leading axes."""
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x, dtype=np.float32)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_rotate(x: np.ndarray, position: int, base: float = 10000.0) -> np.ndarray:
    """Rotate a single head vector to the given absolute position."""
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-1] % 2 != 0:
        raise ShapeError(f"rotary input length must be even, got {x.shape[-1]}")
    if position < 0:
        raise InputError("position must be non-negative")
    cos, sin = _rope_cos_sin(np.array([position]), x.shape[-1], base)
    return _rope_apply(x, cos[0], sin[0])


def rope_inverse(x: np.ndarray, position: int, base: float = 10000.0) -> np.ndarray:
    """Undo ``rope_rotate`` at the same position."""
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-1] % 2 != 0:
        raise ShapeError(f"rotary input length must be even, got {x.shape[-1]}")
    cos, sin = _rope_cos_sin(np.array([position]), x.shape[-1], base)
    return _rope_apply(x, cos[0], -sin[0])


def rope_rotate_sequence(x: np.ndarray, positions: np.ndarray, base: float) -> np.ndarray:
    """Rotate [T, H, D] per-token at per-token absolute positions."""
    cos, sin = _rope_cos_sin(positions, x.shape[-1], base)
    return _rope_apply(x, cos[:, None, :], sin[:, None, :])


# --------------------------------------------------------------------------
# Forward pass
# --------------------------------------------------------------------------

def rms_norm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    scale = np.sqrt(np.mean(np.square(x, dtype=np.float32), axis=-1, keepdims=True) + eps)
    return (x / scale).astype(np.float32)


def silu(x: np.ndarray) -> np.ndarray:
    return (x / (1.0 + np.exp(-x))).astype(np.float32)


def _check_tokens(spec: ModelSpec, token_ids) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise InputError("token sequence must be a non-empty 1-D sequence")
    if ids.min() < 0 or ids.max() >= spec.vocab_size:
        raise InputError(
            f"token ids must lie in [0, {spec.vocab_size}); got range "
            f"[{ids.min()}, {ids.max()}]"
        )
    return ids


def _additive_mask(allowed: np.ndarray) -> np.ndarray:
    """Bool [T, T] -> float32 mask of 0 where allowed, -inf elsewhere."""
    return np.where(allowed, np.float32(0.0), np.float32(-np.inf))


def _masked_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                      add_mask: np.ndarray, group: int, return_probs: bool = False):
    """Causal GQA attention; q [T, Hq, D], k/v [T, Hkv, D], additive mask [T, T]."""
    d = q.shape[-1]
    qh = np.ascontiguousarray(q.transpose(1, 0, 2))  # [Hq, T, D]
    kh = np.ascontiguousarray(np.repeat(k, group, axis=1).transpose(1, 0, 2))
    vh = np.ascontiguousarray(np.repeat(v, group, axis=1).transpose(1, 0, 2))
    scores = (qh @ kh.transpose(0, 2, 1)) / np.float32(np.sqrt(d))  # [Hq, T, T]
    scores += add_mask[None, :, :]
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = (weights @ vh).transpose(1, 0, 2)  # [T, Hq, D]
    return (out, weights) if return_probs else (out, None)


@dataclass
class _Perturbation:
    layer: int
    config: LayerCompressionConfig
    scorer_seed: int
    scorer: str = "random_perm"
    group_size: int = 32


def _perturbation_scores(k_pre: np.ndarray, q_pre: np.ndarray, probs_full: np.ndarray,
                         scorer: str, seed: int) -> np.ndarray:
    t = k_pre.shape[0]
    if scorer == "random_perm":
        return score_random_permutation(t, seed).values
    if scorer == "attn_accum":
        # Full-precision attention received per key, summed over heads and queries.
        return score_attention_accumulation(probs_full.sum(axis=0)).values
    if scorer == "trig":
        direction = q_pre.mean(axis=(0, 1))
        return score_trigonometric(np.swapaxes(k_pre, 0, 1), direction).values
    raise ConfigurationError(f"unknown scorer {scorer!r}")


def _compressed_layer_attention(q_rot, k_rot, v, k_pre, q_pre, causal, causal_add,
                                perturb: _Perturbation, group: int):
    """Apply the eviction + quantization pipeline to one layer's K/V, then attend."""
    t = q_rot.shape[0]
    cfg = perturb.config
    if cfg.keep == 1.0:
        retained_mask = np.ones(t, dtype=bool)
    else:
        probs_full = None
        if perturb.scorer == "attn_accum":
            _, probs_full = _masked_attention(q_rot, k_rot, v, causal_add, group, return_probs=True)
        scores = _perturbation_scores(k_pre, q_pre, probs_full, perturb.scorer, perturb.scorer_seed)
        retained = select_retained(scores, cfg.keep)
        retained_mask = np.zeros(t, dtype=bool)
        retained_mask[list(retained.indices)] = True
    # Quantize full-length K/V; the mask below restricts which entries attend.
    k_hat = np.swapaxes(dequantize(quantize_k(np.swapaxes(k_rot, 0, 1), cfg.k_bits)), 0, 1)
    v_hat = np.swapaxes(dequantize(quantize_v(np.swapaxes(v, 0, 1), cfg.v_bits, perturb.group_size)), 0, 1)
    # Retained-or-self, causally masked: the current token is always in a
    # real cache at its own step, so no query row can go empty.
    mask = causal & (retained_mask[None, :] | np.eye(t, dtype=bool))
    out, _ = _masked_attention(q_rot, k_hat, v_hat, _additive_mask(mask), group)
    return out


def _forward(model: ToyModel, token_ids, perturb: _Perturbation | None,
             record: bool) -> LayerActivations:
    spec = model.spec
    ids = _check_tokens(spec, token_ids)
    t = ids.size
    group = spec.num_q_heads // spec.num_kv_heads
    causal = np.tril(np.ones((t, t), dtype=bool))
    causal_add = _additive_mask(causal)
    cos, sin = _rope_cos_sin(np.arange(t), spec.head_dim, spec.rope_base)
    cos, sin = cos[:, None, :], sin[:, None, :]  # broadcast over heads

    x = model.embedding[ids]
    attn_outputs: list[np.ndarray] | None = [] if record else None
    for li, lw in enumerate(model.layers):
        h = rms_norm(x)
        q = (h @ lw.wq).reshape(t, spec.num_q_heads, spec.head_dim)
        k = (h @ lw.wk).reshape(t, spec.num_kv_heads, spec.head_dim)
        v = (h @ lw.wv).reshape(t, spec.num_kv_heads, spec.head_dim)
        q_rot = _rope_apply(q, cos, sin)
        k_rot = _rope_apply(k, cos, sin)
        if perturb is not None and perturb.layer == li:
            attn = _compressed_layer_attention(
                q_rot, k_rot, v, k, q, causal, causal_add, perturb, group
            )
        else:
            attn, _ = _masked_attention(q_rot, k_rot, v, causal_add, group)
        attn_out = attn.reshape(t, spec.hidden_dim) @ lw.wo
        if record:
            attn_outputs.append(attn_out)
        x = x + attn_out
        x = x + silu(rms_norm(x) @ lw.w_mlp_in) @ lw.w_mlp_out
    logits = rms_norm(x) @ model.unembedding
    return LayerActivations(attn_outputs, logits)


def forward_full(model: ToyModel, token_ids, record: bool = True) -> LayerActivations:
    """Dense (uncompressed) causal forward over the whole sequence."""
    return _forward(model, token_ids, None, record)


def forward_with_layer_perturbation(
    model: ToyModel,
    token_ids,
    layer: int,
    config: LayerCompressionConfig,
    scorer_seed: int,
    scorer: str = "random_perm",
    group_size: int = 32,
    record: bool = True,
) -> LayerActivations:
    """Dense forward with one layer's K/V compressed before attention."""
    if not (0 <= layer < model.spec.num_layers):
        raise InputError(f"layer {layer} out of range for {model.spec.num_layers} layers")
    perturb = _Perturbation(layer, config, scorer_seed, scorer, group_size)
    return _forward(model, token_ids, perturb, record)


# --------------------------------------------------------------------------
# Golden-logits regression file
# --------------------------------------------------------------------------

def logits_checksum(logits: np.ndarray) -> float:
    """Order-independent scalar fingerprint of a logits matrix."""
    return float(np.sum(logits, dtype=np.float64))


def write_golden_logits(path, model: ToyModel, prompt) -> dict:
    acts = forward_full(model, prompt, record=False)
    doc = {
        "format_version": GOLDEN_FORMAT_VERSION,
        "spec": model.spec.to_json(),
        "spec_hash": model.spec_hash(),
        "prompt": [int(p) for p in prompt],
        "logits_checksum": logits_checksum(acts.logits),
        "final_row_head": [float(x) for x in acts.logits[-1, :8]],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc


def verify_golden_logits(path, model: ToyModel, atol: float = 5e-4) -> dict:
    """Re-run the pinned prompt and compare against the stored checksum."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"golden logits file is not valid JSON: {exc}") from exc
    if doc.get("spec_hash") != model.spec_hash():
        raise FormatError("golden logits file was recorded for a different spec")
    acts = forward_full(model, doc["prompt"], record=False)
    got = logits_checksum(acts.logits)
    if abs(got - doc["logits_checksum"]) > atol:
        raise FormatError(
            f"golden logits checksum drifted: stored {doc['logits_checksum']!r}, got {got!r}"
        )
    head = np.asarray(doc["final_row_head"], dtype=np.float64)
    if not np.allclose(acts.logits[-1, :8], head, atol=atol):
        raise FormatError("golden final-row head values drifted")
    return doc
