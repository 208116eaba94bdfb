"""Two-sided geometric (discrete Laplace) noise for histogram counts.

Each bin count has sensitivity 1 under adding or removing one observation, so
adding noise with pmf ``(1-a)/(1+a) * a**|k|``, ``a = exp(-eps/sensitivity)``,
to every bin makes the released histogram eps-differentially private.
Negative noisy counts are truncated to 0, which is post-processing.
"""

from __future__ import annotations

import hashlib
import math
from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np

from .histogram import HistogramTable, UnitHistogram

DP_MODES = ("per-unit", "pooled")


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float
    sensitivity: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if int(self.sensitivity) != self.sensitivity or self.sensitivity < 1:
            raise ValueError("sensitivity must be a positive integer")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def alpha(self) -> float:
        return math.exp(-self.epsilon / self.sensitivity)


def two_sided_geometric_pmf(k, alpha: float):
    k = np.abs(np.asarray(k))
    return (1 - alpha) / (1 + alpha) * alpha**k


def _noise(alpha: float, size, rng: np.random.Generator) -> np.ndarray:
    if alpha == 0.0:
        return np.zeros(size, dtype=np.int64)
    # difference of two i.i.d. geometric variables is two-sided geometric
    return rng.geometric(1 - alpha, size) - rng.geometric(1 - alpha, size)


def sample_two_sided_geometric(alpha: float, rng: np.random.Generator, size=None):
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    out = _noise(alpha, size if size is not None else 1, rng)
    return int(out[0]) if size is None else out


def unit_rng(seed: int, unit_id: str) -> np.random.Generator:
    """Independent noise stream for one unit, keyed by (seed, unit_id)."""
    digest = hashlib.blake2b(str(unit_id).encode(), digest_size=8).digest()
    key = int.from_bytes(digest, "little")
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


def _truncate(noisy) -> np.ndarray:
    return np.maximum(noisy, 0)


def privatize_histogram(
    hist: UnitHistogram, params: PrivacyParams, n_bins: int, rng: np.random.Generator
) -> UnitHistogram:
    """Noise every one of the ``n_bins`` bins, including empty ones."""
    counts = hist.dense(n_bins)
    if np.any(counts < 0) or np.any(counts != np.round(counts)):
        raise ValueError("counts must be non-negative integers")
    noisy = _truncate(counts.astype(np.int64) + _noise(params.alpha, n_bins, rng))
    return UnitHistogram.from_dense(hist.unit_id, hist.arm, noisy)


def privatize_all(
    histograms: Iterable[UnitHistogram], params: PrivacyParams, n_bins: int
) -> list[UnitHistogram]:
    return [
        privatize_histogram(h, params, n_bins, unit_rng(params.seed, h.unit_id))
        for h in histograms
    ]


def privatize_pooled(pooled, params: PrivacyParams, rng: np.random.Generator) -> np.ndarray:
    pooled = np.asarray(pooled)
    return _truncate(pooled.astype(np.int64) + _noise(params.alpha, pooled.shape, rng))


def privatize_table(
    table: HistogramTable, params: PrivacyParams, rng: np.random.Generator
) -> HistogramTable:
    """Vectorised per-unit privatisation drawing all noise from one stream.

    Faster than :func:`privatize_all` for repeated simulation draws, but the
    noise for a unit depends on the table's unit order.
    """
    m = table.counts
    dense = m.toarray() if hasattr(m, "toarray") else np.asarray(m)
    noisy = _truncate(dense.astype(np.int64) + _noise(params.alpha, dense.shape, rng))
    return table.with_counts(noisy.astype(float))
