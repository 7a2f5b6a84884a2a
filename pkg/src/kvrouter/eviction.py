"""Token-importance scoring and retained-set selection.

Three scorers are available by name:

* ``attn_accum``  -- token j's score is the total attention weight it
  received over the recorded query steps (heavy-hitter style).
* ``trig``        -- |cosine similarity| between the token's pre-rotation key
  (head-averaged) and a mean recent query direction. A placeholder
  reconstruction of trigonometric importance scoring, not a tuned signal;
  treat it accordingly.
* ``random_perm`` -- a seeded random permutation of 0..T-1 as scores; used by
  calibration so that eviction damage is measured under a reproducible,
  content-independent policy.

Selection keeps the top ``max(1, round_half_up(keep * T))`` scorers, breaking
ties toward the lower index so early (sink-like) tokens win, and returns the
retained indices sorted ascending so relative order is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import KEEP_RATIOS
from .errors import ConfigurationError, InputError

SCORER_NAMES = ("attn_accum", "trig", "random_perm")


@dataclass
class ImportanceScores:
    """One real score per cached token position."""

    values: np.ndarray
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise InputError("importance scores must be one-dimensional")
        if not np.all(np.isfinite(self.values)):
            raise InputError("importance scores must be finite")

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class RetainedSet:
    """Sorted cache indices that survive an eviction, plus their original positions."""

    indices: tuple[int, ...]
    positions: tuple[int, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.indices)


def score_attention_accumulation(attention_history: np.ndarray) -> ImportanceScores:
    """Sum attention weight received per token over recorded query steps.

    ``attention_history`` is [n_steps, cache_len]: one row of (head-summed)
    attention weights per recorded query step, each covering all cached
    positions.
    """
    hist = np.asarray(attention_history, dtype=np.float64)
    if hist.size == 0:
        raise InputError("attention history is empty")
    if hist.ndim == 1:
        hist = hist[None, :]
    if hist.ndim != 2:
        raise InputError(f"attention history must be 2-D, got shape {hist.shape}")
    return ImportanceScores(hist.sum(axis=0), "attn_accum")


def score_trigonometric(pre_rope_keys: np.ndarray, query_direction: np.ndarray) -> ImportanceScores:
    """|cos| between each head-averaged pre-rotation key and the query direction."""
    keys = np.asarray(pre_rope_keys, dtype=np.float64)
    if keys.ndim == 3:  # [H, T, D] -> head average
        keys = keys.mean(axis=0)
    if keys.ndim != 2:
        raise InputError(f"expected [T, D] or [H, T, D] keys, got shape {keys.shape}")
    q = np.asarray(query_direction, dtype=np.float64).reshape(-1)
    if q.shape[0] != keys.shape[1]:
        raise InputError("query direction length does not match key dim")
    qn = np.linalg.norm(q)
    kn = np.linalg.norm(keys, axis=1)
    denom = kn * qn
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(denom > 0.0, (keys @ q) / np.where(denom > 0.0, denom, 1.0), 0.0)
    return ImportanceScores(np.abs(cos), "trig")


def score_random_permutation(cache_len: int, seed: int) -> ImportanceScores:
    """Seeded permutation of 0..cache_len-1 used as scores."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return ImportanceScores(rng.permutation(cache_len).astype(np.float64), "random_perm")


def retention_count(keep: float, cache_len: int) -> int:
    """Round-half-up with a floor of one token."""
    return max(1, int(np.floor(keep * cache_len + 0.5)))


def select_retained(
    scores: ImportanceScores | np.ndarray,
    keep: float,
    positions: np.ndarray | None = None,
) -> RetainedSet:
    """Keep the highest-scoring tokens at the given keep ratio.

    Ties break toward the lower index; retained indices come back sorted
    ascending. ``positions`` (original absolute positions, parallel to the
    scores) is carried through when supplied, else indices stand in.
    """
    if keep not in KEEP_RATIOS:
        raise ConfigurationError(f"keep ratio {keep!r} not in {KEEP_RATIOS}")
    values = scores.values if isinstance(scores, ImportanceScores) else np.asarray(scores, dtype=np.float64)
    t = len(values)
    if t == 0:
        raise InputError("cannot select from an empty score vector")
    n = retention_count(keep, t)
    # Stable sort on negated scores: descending by score, ties by lower index.
    order = np.argsort(-values, kind="stable")
    kept = np.sort(order[:n])
    if positions is None:
        pos = tuple(int(i) for i in kept)
    else:
        positions = np.asarray(positions)
        if len(positions) != t:
            raise InputError("positions length does not match scores")
        pos = tuple(int(p) for p in positions[kept])
    return RetainedSet(tuple(int(i) for i in kept), pos)
