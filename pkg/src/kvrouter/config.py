"""The per-layer compression design space.

Each transformer layer gets one (keep, k_bits, v_bits) tuple: the fraction of
cached tokens retained after eviction, and the stored bit-widths of K and V.
(1.0, 16, 16) is the identity config: nothing evicted, nothing quantized.

Three named spaces are exposed:

* ``full``    -- the 6 x 3 x 3 = 54-config cross product.
* ``table2``  -- identity plus the 9 single-axis probe ops (five eviction
  ratios at 16/16 bits, K-only quant at 8/4 bits, V-only quant at 8/4 bits).
* ``calib11`` -- the 11-config probe set: ``table2`` plus the fixed K8/V4
  combination.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from .errors import ConfigurationError

KEEP_RATIOS = (0.1, 0.25, 0.5, 0.75, 0.9, 1.0)
BIT_WIDTHS = (16, 8, 4)
SPACE_NAMES = ("full", "table2", "calib11")


@dataclass(frozen=True)
class LayerCompressionConfig:
    """One compression choice for one layer."""

    keep: float
    k_bits: int
    v_bits: int

    def __post_init__(self):
        if self.keep not in KEEP_RATIOS:
            raise ConfigurationError(
                f"keep ratio {self.keep!r} not in {KEEP_RATIOS}"
            )
        if self.k_bits not in BIT_WIDTHS:
            raise ConfigurationError(f"k_bits {self.k_bits!r} not in {BIT_WIDTHS}")
        if self.v_bits not in BIT_WIDTHS:
            raise ConfigurationError(f"v_bits {self.v_bits!r} not in {BIT_WIDTHS}")

    @property
    def is_identity(self) -> bool:
        return self.keep == 1.0 and self.k_bits == 16 and self.v_bits == 16

    @property
    def byte_factor(self) -> float:
        """Bytes stored per (token, kv-head, head-dim) coordinate pair."""
        return self.keep * (self.k_bits + self.v_bits) / 8.0

    @property
    def label(self) -> str:
        return f"keep{self.keep:g}_k{self.k_bits}_v{self.v_bits}"

    def single_axis_name(self) -> str | None:
        """Canonical name if exactly one knob deviates from identity, else None."""
        if self.is_identity:
            return "identity"
        evicts = self.keep != 1.0
        kq = self.k_bits != 16
        vq = self.v_bits != 16
        if evicts and not kq and not vq:
            return f"evict_{round((1.0 - self.keep) * 100)}"
        if kq and not evicts and not vq:
            return f"k_quant_{self.k_bits}"
        if vq and not evicts and not kq:
            return f"v_quant_{self.v_bits}"
        return None

    def to_json(self) -> dict:
        return {"keep": self.keep, "k_bits": self.k_bits, "v_bits": self.v_bits}

    @classmethod
    def from_json(cls, obj: dict) -> "LayerCompressionConfig":
        return cls(float(obj["keep"]), int(obj["k_bits"]), int(obj["v_bits"]))


IDENTITY_CONFIG = LayerCompressionConfig(1.0, 16, 16)

# Single-axis probe ops in canonical order: mild-to-aggressive eviction,
# then K quant, then V quant.
_SINGLE_AXIS_OPS = (
    LayerCompressionConfig(0.9, 16, 16),   # evict_10
    LayerCompressionConfig(0.75, 16, 16),  # evict_25
    LayerCompressionConfig(0.5, 16, 16),   # evict_50
    LayerCompressionConfig(0.25, 16, 16),  # evict_75
    LayerCompressionConfig(0.1, 16, 16),   # evict_90
    LayerCompressionConfig(1.0, 8, 16),    # k_quant_8
    LayerCompressionConfig(1.0, 4, 16),    # k_quant_4
    LayerCompressionConfig(1.0, 16, 8),    # v_quant_8
    LayerCompressionConfig(1.0, 16, 4),    # v_quant_4
)


@dataclass(frozen=True)
class ConfigSpace:
    """Ordered candidate list; a config's id is its index."""

    name: str
    configs: tuple[LayerCompressionConfig, ...]

    def __post_init__(self):
        if IDENTITY_CONFIG not in self.configs:
            raise ConfigurationError("config space must contain the identity config")
        if len(set(self.configs)) != len(self.configs):
            raise ConfigurationError("config space contains duplicates")

    def __len__(self) -> int:
        return len(self.configs)

    def __iter__(self):
        return iter(self.configs)

    @property
    def identity_id(self) -> int:
        return self.configs.index(IDENTITY_CONFIG)

    def index_of(self, config: LayerCompressionConfig) -> int:
        try:
            return self.configs.index(config)
        except ValueError:
            raise ConfigurationError(
                f"config {config.label} not in space {self.name!r}"
            ) from None

    def to_json(self) -> list[dict]:
        return [
            {"id": i, **c.to_json()} for i, c in enumerate(self.configs)
        ]

    @classmethod
    def from_json(cls, name: str, entries: list[dict]) -> "ConfigSpace":
        ordered = sorted(entries, key=lambda e: int(e["id"]))
        if [int(e["id"]) for e in ordered] != list(range(len(ordered))):
            raise ConfigurationError("config ids must be 0..n-1")
        return cls(name, tuple(LayerCompressionConfig.from_json(e) for e in ordered))


def full_space() -> ConfigSpace:
    """All 54 combos; id 0 is the cheapest (0.1, 4, 4), id 53 the identity."""
    configs = tuple(
        LayerCompressionConfig(keep, kb, vb)
        for keep, kb, vb in itertools.product(KEEP_RATIOS, (4, 8, 16), (4, 8, 16))
    )
    return ConfigSpace("full", configs)


def table2_space() -> ConfigSpace:
    return ConfigSpace("table2", (IDENTITY_CONFIG,) + _SINGLE_AXIS_OPS)


def calib11_space() -> ConfigSpace:
    extra = (LayerCompressionConfig(1.0, 8, 4),)
    return ConfigSpace("calib11", (IDENTITY_CONFIG,) + _SINGLE_AXIS_OPS + extra)


def space_by_name(name: str) -> ConfigSpace:
    builders = {
        "full": full_space,
        "table2": table2_space,
        "calib11": calib11_space,
    }
    if name not in builders:
        raise ConfigurationError(f"unknown config space {name!r}; expected one of {SPACE_NAMES}")
    return builders[name]()
