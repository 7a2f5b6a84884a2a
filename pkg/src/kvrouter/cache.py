"""Heterogeneous per-layer KV cache with quantized storage and step-count eviction.

Every layer owns an independent store: quantized K/V at the layer's bit
widths, a strictly-increasing array of original token positions, and a length
that may differ from every other layer once eviction starts. Keys are stored
already rotated at their original absolute positions, so attention needs no
re-rotation; the position array is still maintained and exposed for
diagnostics and the equivalence checks.

Eviction fires on a step-count trigger (every ``eviction_period`` appended
tokens, default 128); layers at keep=1.0 never shrink. Quantized blocks are
recomputed from the layer's raw mirror whenever the store mutates, which
makes value groups re-block over the retained sequence after an eviction.

One cache serves one sequence (single writer); distinct sequences decode
concurrently with independent caches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import LayerCompressionConfig
from .errors import ConfigurationError, InputError, ProtocolError, StateError
from .eviction import ImportanceScores, score_trigonometric, select_retained
from .quant import (
    QuantizedBlock,
    dequantize,
    metadata_bytes,
    quantize_k,
    quantize_v,
    stored_bytes,
)


@dataclass
class LayerCacheState:
    """One layer's store: positions, raw mirrors, and current quantized blocks."""

    layer: int
    config: LayerCompressionConfig
    group_size: int
    positions: np.ndarray                   # int64 [T_l], strictly increasing
    k_rot: np.ndarray                       # float32 [H, T_l, D], post-rotation
    k_pre: np.ndarray                       # float32 [H, T_l, D], pre-rotation
    v: np.ndarray                           # float32 [H, T_l, D]
    attn_accum: np.ndarray                  # float64 [T_l]
    _k_block: QuantizedBlock | None = None
    _v_block: QuantizedBlock | None = None

    def __len__(self) -> int:
        return int(self.positions.size)

    def _blocks(self) -> tuple[QuantizedBlock, QuantizedBlock]:
        if self._k_block is None:
            self._k_block = quantize_k(self.k_rot, self.config.k_bits)
            self._v_block = quantize_v(self.v, self.config.v_bits, self.group_size)
        return self._k_block, self._v_block

    def invalidate(self) -> None:
        self._k_block = None
        self._v_block = None

    def payload_bytes(self) -> float:
        kb, vb = self._blocks()
        return stored_bytes(kb) + stored_bytes(vb)

    def metadata_bytes(self) -> float:
        kb, vb = self._blocks()
        return metadata_bytes(kb) + metadata_bytes(vb)


class HeteroKVCache:
    """Per-layer quantized KV stores driven by a shared global step counter."""

    def __init__(
        self,
        num_layers: int,
        num_q_heads: int,
        num_kv_heads: int,
        head_dim: int,
        configs: list[LayerCompressionConfig],
        eviction_period: int = 128,
        group_size: int = 32,
    ):
        if len(configs) != num_layers:
            raise ConfigurationError(
                f"need one config per layer: got {len(configs)} for {num_layers} layers"
            )
        if eviction_period <= 0:
            raise ConfigurationError("eviction_period must be positive")
        if num_q_heads % num_kv_heads != 0:
            raise ConfigurationError("num_q_heads must be divisible by num_kv_heads")
        self.num_layers = num_layers
        self.num_q_heads = num_q_heads
        self.num_kv_heads = num_kv_heads
        self.head_dim = head_dim
        self.eviction_period = eviction_period
        self.group_size = group_size
        self.step_count = 0  # number of fully appended positions
        empty = lambda: np.zeros((num_kv_heads, 0, head_dim), dtype=np.float32)
        self.layers = [
            LayerCacheState(
                layer=i, config=cfg, group_size=group_size,
                positions=np.zeros(0, dtype=np.int64),
                k_rot=empty(), k_pre=empty(), v=empty(),
                attn_accum=np.zeros(0, dtype=np.float64),
            )
            for i, cfg in enumerate(configs)
        ]
        # Running mean ingredients for the trigonometric scorer.
        self._query_dir_sum = [np.zeros(head_dim, dtype=np.float64) for _ in range(num_layers)]
        self._query_count = [0] * num_layers

    # -- mutation ----------------------------------------------------------

    def append(self, layer: int, k_new: np.ndarray, v_new: np.ndarray, position: int,
               k_pre: np.ndarray | None = None) -> None:
        """Add one token's rotated K and V to a layer at the current global step."""
        st = self._layer(layer)
        if position != self.step_count:
            raise ProtocolError(
                f"append at position {position} but global step is {self.step_count}"
            )
        if len(st) and position <= int(st.positions[-1]):
            raise ProtocolError("append position must exceed all cached positions")
        k_new = np.asarray(k_new, dtype=np.float32).reshape(self.num_kv_heads, 1, self.head_dim)
        v_new = np.asarray(v_new, dtype=np.float32).reshape(self.num_kv_heads, 1, self.head_dim)
        pre = k_new if k_pre is None else np.asarray(k_pre, dtype=np.float32).reshape(
            self.num_kv_heads, 1, self.head_dim)
        st.k_rot = np.concatenate([st.k_rot, k_new], axis=1)
        st.k_pre = np.concatenate([st.k_pre, pre], axis=1)
        st.v = np.concatenate([st.v, v_new], axis=1)
        st.positions = np.append(st.positions, np.int64(position))
        st.attn_accum = np.append(st.attn_accum, 0.0)
        st.invalidate()

    def end_step(self) -> None:
        """Mark the current position fully appended across all layers."""
        self.step_count += 1

    def maybe_evict(self, layer: int, scores: ImportanceScores | np.ndarray) -> bool:
        """Evict at the layer's keep ratio if the step trigger fires.

        Returns True when tokens were actually dropped. Layers at keep=1.0
        never shrink, and nothing happens off the trigger.
        """
        st = self._layer(layer)
        if self.step_count == 0 or self.step_count % self.eviction_period != 0:
            return False
        values = scores.values if isinstance(scores, ImportanceScores) else np.asarray(scores)
        if len(values) != len(st):
            raise InputError(
                f"scores cover {len(values)} tokens but layer {layer} holds {len(st)}"
            )
        if st.config.keep == 1.0:
            return False
        retained = select_retained(values, st.config.keep, positions=st.positions)
        idx = np.asarray(retained.indices, dtype=np.int64)
        if idx.size == len(st):
            return False
        st.k_rot = st.k_rot[:, idx, :]
        st.k_pre = st.k_pre[:, idx, :]
        st.v = st.v[:, idx, :]
        st.positions = st.positions[idx]
        st.attn_accum = st.attn_accum[idx]
        st.invalidate()
        return True

    # -- attention ---------------------------------------------------------

    def attend(self, layer: int, query: np.ndarray, query_position: int,
               record_scores: bool = False) -> np.ndarray:
        """Softmax attention of one (already rotated) query over the layer store.

        Causality holds by construction: everything cached sits at or before
        ``query_position``. With ``record_scores`` the head-summed attention
        row feeds the layer's accumulated-importance vector.
        """
        st = self._layer(layer)
        if len(st) == 0:
            raise StateError(f"layer {layer} cache is empty")
        if int(st.positions[-1]) > query_position:
            raise ProtocolError("query position precedes cached positions")
        q = np.asarray(query, dtype=np.float32).reshape(self.num_q_heads, self.head_dim)
        kb, vb = st._blocks()
        k_hat = dequantize(kb)
        v_hat = dequantize(vb)
        fanout = self.num_q_heads // self.num_kv_heads
        k_exp = np.repeat(k_hat, fanout, axis=0)   # [Hq, T, D]
        v_exp = np.repeat(v_hat, fanout, axis=0)
        scores = np.einsum("hd,htd->ht", q, k_exp, dtype=np.float32)
        scores /= np.float32(np.sqrt(self.head_dim))
        scores -= scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores, dtype=np.float32)
        weights /= weights.sum(axis=-1, keepdims=True)
        if record_scores:
            st.attn_accum += weights.sum(axis=0).astype(np.float64)
        return np.einsum("ht,htd->hd", weights, v_exp, dtype=np.float32)

    def record_query(self, layer: int, query_pre_rope: np.ndarray) -> None:
        """Feed a pre-rotation query into the layer's mean direction (trig scorer)."""
        q = np.asarray(query_pre_rope, dtype=np.float64).reshape(self.num_q_heads, self.head_dim)
        self._query_dir_sum[layer] += q.mean(axis=0)
        self._query_count[layer] += 1

    # -- scorer inputs -----------------------------------------------------

    def accumulated_scores(self, layer: int) -> ImportanceScores:
        st = self._layer(layer)
        return ImportanceScores(st.attn_accum.copy(), "attn_accum")

    def trig_scores(self, layer: int) -> ImportanceScores:
        st = self._layer(layer)
        if self._query_count[layer] == 0:
            raise StateError("no queries recorded for the trigonometric scorer")
        direction = self._query_dir_sum[layer] / self._query_count[layer]
        return score_trigonometric(st.k_pre, direction)

    # -- inspection --------------------------------------------------------

    def _layer(self, layer: int) -> LayerCacheState:
        if not (0 <= layer < self.num_layers):
            raise InputError(f"layer {layer} out of range")
        return self.layers[layer]

    def layer_length(self, layer: int) -> int:
        return len(self._layer(layer))

    def positions(self, layer: int) -> np.ndarray:
        return self._layer(layer).positions.copy()

    def payload_bytes(self, layer: int | None = None) -> float:
        if layer is not None:
            return self._layer(layer).payload_bytes()
        return sum(st.payload_bytes() for st in self.layers)

    def metadata_bytes(self, layer: int | None = None) -> float:
        if layer is not None:
            return self._layer(layer).metadata_bytes()
        return sum(st.metadata_bytes() for st in self.layers)

    def snapshot(self) -> dict:
        """JSON-ready diagnostic view of the whole cache."""
        return {
            "step_count": self.step_count,
            "eviction_period": self.eviction_period,
            "group_size": self.group_size,
            "total_payload_bytes": self.payload_bytes(),
            "total_metadata_bytes": self.metadata_bytes(),
            "layers": [
                {
                    "layer": st.layer,
                    "config": st.config.to_json(),
                    "length": len(st),
                    "positions": [int(p) for p in st.positions],
                    "payload_bytes": st.payload_bytes(),
                    "metadata_bytes": st.metadata_bytes(),
                }
                for st in self.layers
            ],
        }
