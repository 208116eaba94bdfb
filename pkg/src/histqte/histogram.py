"""Bin boundaries, per-unit histogram aggregation and interpolated rank queries.

Bins are right-closed: bin ``j`` (1-based) spans ``(b_{j-1}, b_j]`` and the
first bin also includes ``b_0``. An observation equal to a boundary is counted
in the bin that boundary closes, so a cumulative count up to ``b_j`` is exactly
the number of observations ``<= b_j``.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy import sparse

ARMS = ("treatment", "control")
STRATEGIES = ("linear", "loglinear", "historical", "custom")


class BinSpecError(ValueError):
    pass


class AggregationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BinSpec:
    boundaries: np.ndarray
    clip_lo: float
    clip_hi: float
    strategy: str = "custom"

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        if b.ndim != 1 or b.size < 2:
            raise BinSpecError("need at least two boundaries")
        if not np.all(np.isfinite(b)):
            raise BinSpecError("boundaries must be finite")
        if np.any(np.diff(b) <= 0):
            raise BinSpecError("boundaries must be strictly increasing")
        if self.clip_lo != b[0] or self.clip_hi != b[-1]:
            raise BinSpecError("clip thresholds must equal the outer boundaries")
        if self.strategy not in STRATEGIES:
            raise BinSpecError(f"unknown strategy {self.strategy!r}")
        b.setflags(write=False)
        object.__setattr__(self, "boundaries", b)
        object.__setattr__(self, "clip_lo", float(self.clip_lo))
        object.__setattr__(self, "clip_hi", float(self.clip_hi))

    @classmethod
    def from_boundaries(cls, boundaries, strategy: str = "custom") -> "BinSpec":
        b = np.asarray(boundaries, dtype=float)
        return cls(b, float(b[0]), float(b[-1]), strategy)

    @property
    def n_bins(self) -> int:
        return self.boundaries.size - 1

    def __eq__(self, other):
        if not isinstance(other, BinSpec):
            return NotImplemented
        return (
            self.strategy == other.strategy
            and self.clip_lo == other.clip_lo
            and self.clip_hi == other.clip_hi
            and np.array_equal(self.boundaries, other.boundaries)
        )

    def __hash__(self):
        return hash((self.strategy, self.boundaries.tobytes()))

    def bin_index(self, values) -> np.ndarray:
        """0-based bin index of each (clipped) value."""
        v = np.clip(np.asarray(values, dtype=float), self.clip_lo, self.clip_hi)
        idx = np.searchsorted(self.boundaries, v, side="left") - 1
        return np.clip(idx, 0, self.n_bins - 1)

    def to_dict(self) -> dict:
        return {
            "boundaries": [float(x) for x in self.boundaries],
            "clip_lo": self.clip_lo,
            "clip_hi": self.clip_hi,
            "strategy": self.strategy,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BinSpec":
        try:
            return cls(
                np.asarray(d["boundaries"], dtype=float),
                float(d["clip_lo"]),
                float(d["clip_hi"]),
                d.get("strategy", "custom"),
            )
        except KeyError as e:
            raise BinSpecError(f"bin spec is missing field {e}") from None

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "BinSpec":
        return cls.from_dict(json.loads(text))


def _degenerate(v: float) -> np.ndarray:
    return np.array([v, v + 1e-9 * max(1.0, abs(v))])


def linear_bins(lo: float, hi: float, n_bins: int) -> BinSpec:
    if not lo < hi:
        raise BinSpecError("linear bins need lo < hi")
    if n_bins < 1:
        raise BinSpecError("n_bins must be positive")
    b = np.linspace(lo, hi, n_bins + 1)
    return BinSpec(b, float(lo), float(hi), "linear")


def log_linear_bins(
    lo: float, hi: float, n_bins: int, log_floor: Optional[float] = None
) -> BinSpec:
    """Boundaries equally spaced in log space.

    When ``lo`` is not positive the log grid starts at ``log_floor`` (1.0 by
    default, or a thousandth of ``hi`` when ``hi <= 1``) and ``lo`` replaces
    the first grid point, so the bin count stays ``n_bins``.
    """
    if not hi > lo:
        raise BinSpecError("log-linear bins need hi > lo")
    if lo < 0:
        raise BinSpecError("log-linear bins need lo >= 0")
    if n_bins < 1:
        raise BinSpecError("n_bins must be positive")
    if log_floor is None:
        log_floor = lo if lo > 0 else (1.0 if hi > 1.0 else hi * 1e-3)
    start = max(lo, log_floor)
    if not 0 < start < hi:
        raise BinSpecError("log floor must lie in (0, hi)")
    b = np.exp(np.linspace(math.log(start), math.log(hi), n_bins + 1))
    b[0] = lo
    b[-1] = hi
    return BinSpec(b, float(lo), float(hi), "loglinear")


def nearest_rank(sorted_values: np.ndarray, num: int, den: int):
    """X_(floor(n * num/den)) with the rank clamped to [1, n]."""
    n = len(sorted_values)
    r = min(max((n * num) // den, 1), n)
    return sorted_values[r - 1]


def historical_quantile_bins(historical_values, n_bins: int) -> BinSpec:
    v = np.sort(np.asarray(historical_values, dtype=float))
    if v.size == 0:
        raise BinSpecError("historical values are empty")
    if n_bins < 1:
        raise BinSpecError("n_bins must be positive")
    raw = np.array([nearest_rank(v, j, n_bins) for j in range(n_bins + 1)])
    b = np.unique(raw)
    if b.size < 2:
        b = _degenerate(float(b[0]))
    return BinSpec(b, float(b[0]), float(b[-1]), "historical")


def exact_bins(values) -> BinSpec:
    """Bins whose right boundaries are the distinct values of ``values``.

    Each distinct value closes its own bin, so histogram quantiles on data
    aggregated with this spec reproduce the sorted-data order statistics.
    """
    d = np.unique(np.asarray(values, dtype=float))
    if d.size == 0:
        raise BinSpecError("values are empty")
    span = d[-1] - d[0]
    pad = span / d.size if span > 0 else max(1.0, abs(d[0]))
    b = np.concatenate([[d[0] - pad], d])
    return BinSpec(b, float(b[0]), float(b[-1]), "custom")


def clip(value, spec: BinSpec):
    return np.minimum(np.maximum(value, spec.clip_lo), spec.clip_hi)


@dataclass
class UnitHistogram:
    """One unit's sparse bin counts (bin index -> count)."""

    unit_id: str
    arm: str
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.arm not in ARMS:
            raise AggregationError(f"unknown arm {self.arm!r}")

    @property
    def total(self) -> float:
        return sum(self.counts.values())

    def dense(self, n_bins: int) -> np.ndarray:
        out = np.zeros(n_bins)
        for j, c in self.counts.items():
            if not 0 <= j < n_bins:
                raise AggregationError(f"bin index {j} out of range for {n_bins} bins")
            out[j] = c
        return out

    @classmethod
    def from_dense(cls, unit_id: str, arm: str, counts) -> "UnitHistogram":
        sparse_counts = {}
        for j, c in enumerate(counts):
            if c:
                c = float(c)
                sparse_counts[j] = int(c) if c.is_integer() else c
        return cls(unit_id, arm, sparse_counts)

    def to_dict(self) -> dict:
        return {
            "unit": self.unit_id,
            "arm": self.arm,
            "counts": {str(j): self.counts[j] for j in sorted(self.counts)},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "UnitHistogram":
        counts = {int(j): c for j, c in d["counts"].items()}
        return cls(str(d["unit"]), d["arm"], counts)


def aggregate(
    observations: Iterable[tuple[str, str, float]], spec: BinSpec
) -> list[UnitHistogram]:
    """Count clipped observations into one histogram per unit.

    Raises AggregationError if a unit shows up under both arms.
    """
    hists: dict[str, UnitHistogram] = {}
    bounds = spec.boundaries
    last = spec.n_bins - 1
    for unit_id, arm, value in observations:
        unit_id = str(unit_id)
        h = hists.get(unit_id)
        if h is None:
            h = hists[unit_id] = UnitHistogram(unit_id, arm)
        elif h.arm != arm:
            raise AggregationError(f"unit {unit_id!r} appears in both arms")
        v = min(max(float(value), spec.clip_lo), spec.clip_hi)
        j = min(max(int(np.searchsorted(bounds, v, side="left")) - 1, 0), last)
        h.counts[j] = h.counts.get(j, 0) + 1
    return [hists[u] for u in sorted(hists)]


def merge(h1: UnitHistogram, h2: UnitHistogram) -> UnitHistogram:
    if (h1.unit_id, h1.arm) != (h2.unit_id, h2.arm):
        raise AggregationError("can only merge histograms of the same unit and arm")
    counts = dict(h1.counts)
    for j, c in h2.counts.items():
        counts[j] = counts.get(j, 0) + c
    return UnitHistogram(h1.unit_id, h1.arm, counts)


def pooled_counts(
    histograms: Iterable[UnitHistogram], arm: str, n_bins: int
) -> tuple[np.ndarray, float]:
    pooled = np.zeros(n_bins)
    for h in histograms:
        if h.arm != arm:
            continue
        for j, c in h.counts.items():
            pooled[j] += c
    return pooled, float(pooled.sum())


@dataclass(frozen=True)
class RankLocator:
    bin_index: int
    k: float
    m: float
    bin_lo: float
    bin_hi: float


def locate_rank(pooled, spec: BinSpec, r: float) -> RankLocator:
    """Find the bin holding rank ``r`` and the rank's position inside it."""
    pooled = np.asarray(pooled, dtype=float)
    cum = np.cumsum(pooled)
    n = cum[-1] if cum.size else 0.0
    if not 1 <= r <= n * (1 + 1e-12):
        raise ValueError(f"rank {r} outside [1, {n}]")
    j = int(np.searchsorted(cum, r, side="left"))
    j = min(j, pooled.size - 1)
    before = cum[j - 1] if j > 0 else 0.0
    b = spec.boundaries
    return RankLocator(j, float(r - before), float(pooled[j]), float(b[j]), float(b[j + 1]))


def value_at_rank(loc: RankLocator) -> float:
    if loc.bin_hi == loc.bin_lo or loc.m <= 0:
        return loc.bin_lo
    frac = loc.k / loc.m
    if frac >= 1.0:
        # exact right edge; b_l + (b_r - b_l) can be off by an ulp
        return loc.bin_hi
    return loc.bin_lo + (loc.bin_hi - loc.bin_lo) * frac


def below_weights(spec: BinSpec, x: float) -> np.ndarray:
    """Per-bin fraction of mass interpolated to lie at or below ``x``."""
    b = spec.boundaries
    w = np.zeros(spec.n_bins)
    if x < b[0]:
        return w
    if x >= b[-1]:
        w[:] = 1.0
        return w
    j = min(int(np.searchsorted(b, x, side="right")) - 1, spec.n_bins - 1)
    w[:j] = 1.0
    w[j] = (x - b[j]) / (b[j + 1] - b[j])
    return w


def interpolated_below(hist: UnitHistogram, spec: BinSpec, x: float) -> float:
    w = below_weights(spec, x)
    return float(sum(c * w[j] for j, c in hist.counts.items()))


class HistogramTable:
    """Column-oriented view of many unit histograms sharing one BinSpec.

    ``counts`` is a units x bins matrix (scipy CSR or dense ndarray); ``arms``
    is a boolean vector, True for treatment.
    """

    def __init__(self, spec: BinSpec, unit_ids: Sequence[str], arms, counts):
        self.spec = spec
        self.unit_ids = list(unit_ids)
        self.arms = np.asarray(arms, dtype=bool)
        self.counts = counts
        if counts.shape != (len(self.unit_ids), spec.n_bins):
            raise AggregationError(
                f"count matrix shape {counts.shape} does not match "
                f"{len(self.unit_ids)} units x {spec.n_bins} bins"
            )

    @classmethod
    def from_histograms(
        cls, histograms: Iterable[UnitHistogram], spec: BinSpec
    ) -> "HistogramTable":
        rows, cols, vals, ids, arms = [], [], [], [], []
        seen = set()
        for i, h in enumerate(histograms):
            if h.unit_id in seen:
                raise AggregationError(f"duplicate unit {h.unit_id!r}")
            seen.add(h.unit_id)
            ids.append(h.unit_id)
            arms.append(h.arm == "treatment")
            for j, c in h.counts.items():
                if not 0 <= j < spec.n_bins:
                    raise AggregationError(f"bin index {j} out of range")
                rows.append(i)
                cols.append(j)
                vals.append(float(c))
        m = sparse.csr_matrix(
            (vals, (rows, cols)), shape=(len(ids), spec.n_bins), dtype=float
        )
        return cls(spec, ids, arms, m)

    @classmethod
    def from_observations(cls, obs, spec: BinSpec) -> "HistogramTable":
        """Vectorised aggregation of an :class:`~histqte.synth.Observations`."""
        units, inverse = np.unique(obs.unit_ids, return_inverse=True)
        unit_arm = np.zeros(units.size, dtype=bool)
        unit_arm[inverse] = obs.treated
        check = np.zeros(units.size, dtype=int)
        np.add.at(check, inverse, obs.treated.astype(int))
        sizes = np.bincount(inverse, minlength=units.size)
        mixed = (check != 0) & (check != sizes)
        if mixed.any():
            raise AggregationError(f"unit {units[mixed][0]!r} appears in both arms")
        cols = spec.bin_index(obs.values)
        m = sparse.csr_matrix(
            (np.ones(cols.size), (inverse, cols)),
            shape=(units.size, spec.n_bins),
            dtype=float,
        )
        m.sum_duplicates()
        return cls(spec, [str(u) for u in units], unit_arm, m)

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    def with_arms(self, arms) -> "HistogramTable":
        return HistogramTable(self.spec, self.unit_ids, arms, self.counts)

    def with_counts(self, counts) -> "HistogramTable":
        return HistogramTable(self.spec, self.unit_ids, self.arms, counts)

    def arm_mask(self, arm: str) -> np.ndarray:
        return self.arms if arm == "treatment" else ~self.arms

    def to_histograms(self) -> Iterator[UnitHistogram]:
        m = self.counts
        dense = not sparse.issparse(m)
        if not dense:
            m = sparse.csr_matrix(m)
        for i, u in enumerate(self.unit_ids):
            arm = "treatment" if self.arms[i] else "control"
            if dense:
                yield UnitHistogram.from_dense(u, arm, m[i])
            else:
                lo, hi = m.indptr[i], m.indptr[i + 1]
                counts = {}
                for j, c in zip(m.indices[lo:hi], m.data[lo:hi]):
                    if c:
                        c = float(c)
                        counts[int(j)] = int(c) if c.is_integer() else c
                yield UnitHistogram(u, arm, counts)


def as_table(
    histograms: Union[HistogramTable, Iterable[UnitHistogram]], spec: BinSpec
) -> HistogramTable:
    if isinstance(histograms, HistogramTable):
        if histograms.spec != spec:
            raise AggregationError("histogram table uses a different bin spec")
        return histograms
    return HistogramTable.from_histograms(histograms, spec)
