"""Asymmetric uniform quantization codecs for cached K and V tensors.

Both codecs share one core: codes in [0, 2^bits - 1], a real (scale,
zero_point) pair per quantization unit, round-half-to-even. They differ only
in the unit axis:

* K: one unit per channel, where a channel is a (kv-head, head-dim)
  coordinate across all cached tokens.
* V: one unit per contiguous group of ``group_size`` tokens inside each
  channel; the trailing group may be short.

16-bit is a verbatim pass-through. Within every unit the round-trip error is
bounded by ``(max - min) / (2 * (2^bits - 1))`` up to float32 output rounding
(half an ulp of the stored magnitude; codes and stats are computed in
float64). Constant units round-trip exactly (zero-range guard: scale=1,
zero_point=value).

Byte accounting (``stored_bytes``) counts only the code payload,
``tokens * heads * head_dim * bits / 8``; scale/zero_point overhead is
reported separately by ``metadata_bytes``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, FormatError

VALID_BITS = (16, 8, 4)


@dataclass
class QuantizedBlock:
    """Quantized [H, T, D] tensor plus per-unit decode metadata."""

    bits: int
    shape: tuple[int, int, int]
    unit_axis: str  # "channel" or "group"
    group_size: int | None
    codes: np.ndarray | None        # uint8, shape == shape (None at 16 bits)
    scale: np.ndarray | None        # [H, n_units, D], float64
    zero_point: np.ndarray | None   # [H, n_units, D], float64
    raw: np.ndarray | None          # float32 pass-through at 16 bits


def _check_bits(bits: int) -> None:
    if bits not in VALID_BITS:
        raise ConfigurationError(f"bit width {bits!r} not in {VALID_BITS}")


def _unit_stats(unit_min: np.ndarray, unit_max: np.ndarray, bits: int):
    """Per-unit (scale, zero_point); constant units get scale=1, zero=value."""
    levels = (1 << bits) - 1
    spread = unit_max - unit_min
    scale = np.where(spread > 0.0, spread / levels, 1.0)
    return scale, unit_min


def _encode(x: np.ndarray, bits: int, scale: np.ndarray, zero: np.ndarray) -> np.ndarray:
    """Integer codes against broadcast-shaped per-unit stats."""
    codes = np.rint((x - zero) / scale)  # rint rounds half to even
    np.clip(codes, 0, (1 << bits) - 1, out=codes)
    return codes.astype(np.uint8)


def quantize_k(k: np.ndarray, bits: int) -> QuantizedBlock:
    """Per-channel codec for keys; k has shape [H_kv, T, d_head]."""
    _check_bits(bits)
    k = np.asarray(k, dtype=np.float32)
    if k.ndim != 3:
        raise ConfigurationError(f"expected [H, T, D] key tensor, got shape {k.shape}")
    if bits == 16:
        return QuantizedBlock(16, k.shape, "channel", None, None, None, None, k.copy())
    x = k.astype(np.float64)
    unit_min = x.min(axis=1, keepdims=True) if k.shape[1] else np.zeros((k.shape[0], 1, k.shape[2]))
    unit_max = x.max(axis=1, keepdims=True) if k.shape[1] else np.zeros((k.shape[0], 1, k.shape[2]))
    scale, zero = _unit_stats(unit_min, unit_max, bits)
    codes = _encode(x, bits, scale, zero)
    return QuantizedBlock(bits, k.shape, "channel", None, codes, scale, zero, None)


def quantize_v(v: np.ndarray, bits: int, group_size: int = 32) -> QuantizedBlock:
    """Token-grouped codec for values; v has shape [H_kv, T, d_head]."""
    _check_bits(bits)
    if group_size <= 0:
        raise ConfigurationError(f"group_size must be positive, got {group_size}")
    v = np.asarray(v, dtype=np.float32)
    if v.ndim != 3:
        raise ConfigurationError(f"expected [H, T, D] value tensor, got shape {v.shape}")
    if bits == 16:
        return QuantizedBlock(16, v.shape, "group", group_size, None, None, None, v.copy())
    h, t, d = v.shape
    x = v.astype(np.float64)
    if t == 0:
        empty = np.zeros((h, 0, d))
        return QuantizedBlock(bits, v.shape, "group", group_size,
                              np.zeros((h, 0, d), dtype=np.uint8), empty, empty, None)
    starts = np.arange(0, t, group_size)
    unit_min = np.minimum.reduceat(x, starts, axis=1)   # [H, n_groups, D]
    unit_max = np.maximum.reduceat(x, starts, axis=1)
    sizes = np.diff(np.append(starts, t))
    scale, zero = _unit_stats(unit_min, unit_max, bits)  # stored compact
    codes = _encode(x, bits, np.repeat(scale, sizes, axis=1), np.repeat(zero, sizes, axis=1))
    return QuantizedBlock(bits, v.shape, "group", group_size, codes, scale, zero, None)


def _expanded_stats(block: QuantizedBlock) -> tuple[np.ndarray, np.ndarray]:
    h, t, d = block.shape
    scale, zero = block.scale, block.zero_point
    if scale is None or zero is None or scale.shape != zero.shape:
        raise FormatError("quantized block missing or inconsistent unit metadata")
    if block.unit_axis == "channel":
        if scale.shape != (h, 1, d):
            raise FormatError(f"channel metadata shape {scale.shape} does not fit {block.shape}")
        return scale, zero
    if block.unit_axis == "group":
        starts = np.arange(0, t, block.group_size)
        if scale.shape != (h, len(starts), d):
            raise FormatError(f"group metadata shape {scale.shape} does not fit {block.shape}")
        sizes = np.diff(np.append(starts, t))
        return np.repeat(scale, sizes, axis=1), np.repeat(zero, sizes, axis=1)
    raise FormatError(f"unknown unit axis {block.unit_axis!r}")


def dequantize(block: QuantizedBlock) -> np.ndarray:
    """Decode back to float32; ``code * scale + zero_point`` per element."""
    if block.bits == 16:
        if block.raw is None:
            raise FormatError("16-bit block is missing its pass-through payload")
        return block.raw.copy()
    if block.codes is None or block.codes.shape != block.shape:
        raise FormatError("quantized block codes missing or mis-shaped")
    scale, zero = _expanded_stats(block)
    return (block.codes.astype(np.float64) * scale + zero).astype(np.float32)


def stored_bytes(block: QuantizedBlock) -> float:
    """Code payload bytes: tokens x heads x head_dim x bits / 8."""
    h, t, d = block.shape
    return t * h * d * block.bits / 8.0


def metadata_bytes(block: QuantizedBlock) -> float:
    """Scale + zero_point overhead at float32, zero for pass-through blocks."""
    if block.bits == 16 or block.scale is None:
        return 0.0
    return float(block.scale.size + block.zero_point.size) * 4.0
