"""Cluster-robust quantile confidence intervals and quantile treatment effects.

The quantile CI is built in rank space from the order statistics at the
outer ranks ``n(p -/+ z sqrt(p(1-p)/n))`` and then widened or shrunk by a
correction factor ``c``: the ratio of the clustered standard error of the
indicator mean (observations at or below the sample quantile) to its i.i.d.
value ``sqrt(p(1-p)/n)``.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.special import ndtr, ndtri

from .histogram import (
    BinSpec,
    HistogramTable,
    UnitHistogram,
    as_table,
    below_weights,
    locate_rank,
    value_at_rank,
)

log = logging.getLogger(__name__)


class EstimationError(ValueError):
    pass


class InsufficientSampleError(EstimationError):
    """The outer rank interval does not fit inside [1, n]."""


@dataclass(frozen=True)
class ClusterStats:
    K: int
    mean_S: float
    mean_N: float
    var_S: float
    var_N: float
    cov_SN: float


@dataclass(frozen=True)
class QuantileQuery:
    p: float
    alpha: float = 0.05

    def __post_init__(self):
        if not 0 < self.p < 1:
            raise ValueError("p must lie in (0, 1)")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")

    @property
    def z(self) -> float:
        return float(ndtri(1 - self.alpha / 2))

    def at(self, p: float) -> "QuantileQuery":
        return QuantileQuery(p, self.alpha)


@dataclass(frozen=True)
class RankBounds:
    r_mid: float
    L: float
    U: float
    n: float
    clamped: bool = False


@dataclass(frozen=True)
class QuantileEstimate:
    q: float
    se: float
    c: float
    sigma_I: float
    bounds: RankBounds
    x_L: float
    x_U: float
    flags: tuple = ()


@dataclass(frozen=True)
class EffectEstimate:
    tau: float
    se: float
    ci_lo: float
    ci_hi: float
    p_value: float
    kind: str


def cluster_stats(pairs) -> ClusterStats:
    """Sample moments (K-1 denominators) of per-unit (S_i, N_i) pairs."""
    a = np.asarray(pairs, dtype=float)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ValueError("expected a sequence of (S, N) pairs")
    return _moments(a[:, 0], a[:, 1])


def _moments(s: np.ndarray, n: np.ndarray) -> ClusterStats:
    k = s.size
    if k < 2:
        raise EstimationError("need at least two units")
    if np.any(n < 0) or n.sum() <= 0:
        raise EstimationError("unit sizes must be non-negative with a positive total")
    ms, mn = s.mean(), n.mean()
    ds, dn = s - ms, n - mn
    return ClusterStats(
        K=k,
        mean_S=float(ms),
        mean_N=float(mn),
        var_S=float(ds @ ds / (k - 1)),
        var_N=float(dn @ dn / (k - 1)),
        cov_SN=float(ds @ dn / (k - 1)),
    )


def clustered_mean_variance(stats: ClusterStats) -> float:
    """Delta-method variance of the ratio of means S.mean() / N.mean()."""
    if stats.mean_N <= 0:
        raise EstimationError("mean cluster size must be positive")
    ratio = stats.mean_S / stats.mean_N
    v = (
        stats.var_S - 2 * ratio * stats.cov_SN + ratio * ratio * stats.var_N
    ) / (stats.K * stats.mean_N**2)
    if v < 0:
        log.warning("clustered variance %.3g is negative; flooring at 0", v)
        return 0.0
    return float(v)


def rank_bounds(n: float, query: QuantileQuery, strict: bool = True) -> RankBounds:
    """Outer confidence ranks, rounded outward and clamped to [1, n].

    With ``strict`` a rank interval that has to be clamped raises
    InsufficientSampleError; otherwise the clamped bounds are returned with
    ``clamped`` set.
    """
    p, z = query.p, query.z
    if n < 2:
        raise InsufficientSampleError("need at least two observations")
    if n * p < 1:
        raise InsufficientSampleError(f"n*p = {n * p:.3g} < 1")
    half = z * math.sqrt(p * (1 - p) / n)
    lo, hi = n * (p - half), n * (p + half)
    # tiny slack so z -> 0 does not round a whole rank outward
    lo_r = math.floor(lo + 1e-9)
    hi_r = math.ceil(hi - 1e-9)
    clamped = lo_r < 1 or hi_r > n
    if clamped and strict:
        raise InsufficientSampleError(
            f"insufficient sample for quantile {p}: outer ranks "
            f"[{lo:.2f}, {hi:.2f}] exceed [1, {n:g}]"
        )
    r_mid = min(max(math.floor(n * p + 1e-9), 1), n)
    L = min(max(lo_r, 1), n)
    U = min(max(hi_r, 1), n)
    return RankBounds(r_mid, L, U, n, clamped)


def _finish(q, x_l, x_u, s, nn, bounds, query, flags=()) -> QuantileEstimate:
    stats = _moments(np.asarray(s, dtype=float), np.asarray(nn, dtype=float))
    var_ibar = clustered_mean_variance(stats)
    sigma_i = math.sqrt(bounds.n * var_ibar)
    p = query.p
    c = sigma_i / math.sqrt(p * (1 - p))
    se = c * (x_u - x_l) / (2 * query.z)
    return QuantileEstimate(
        q=float(q),
        se=float(max(se, 0.0)),
        c=float(c),
        sigma_I=float(sigma_i),
        bounds=bounds,
        x_L=float(x_l),
        x_U=float(x_u),
        flags=tuple(flags),
    )


class ExactData:
    """Observation-level data prepared for repeated quantile queries.

    Values are sorted once; each arm's order statistics are obtained by
    masking the sorted array, so arm relabelling (A/A permutations) does not
    re-sort.
    """

    def __init__(self, values, unit_index, n_units: int, arms=None, unit_ids=None):
        values = np.asarray(values, dtype=float)
        unit_index = np.asarray(unit_index, dtype=np.int64)
        order = np.argsort(values, kind="stable")
        self.sorted_values = values[order]
        self.sorted_units = unit_index[order]
        self.n_units = int(n_units)
        self.sizes = np.bincount(unit_index, minlength=self.n_units).astype(float)
        self.arms = None if arms is None else np.asarray(arms, dtype=bool)
        self.unit_ids = unit_ids

    @classmethod
    def from_groups(cls, groups: Sequence[Sequence[float]]) -> "ExactData":
        values = np.concatenate([np.asarray(g, dtype=float) for g in groups]) if groups else np.empty(0)
        idx = np.repeat(np.arange(len(groups)), [len(g) for g in groups])
        return cls(values, idx, len(groups))

    @classmethod
    def from_observations(cls, obs) -> "ExactData":
        units, inverse = np.unique(obs.unit_ids, return_inverse=True)
        arms = np.zeros(units.size, dtype=bool)
        arms[inverse] = obs.treated
        return cls(obs.values, inverse, units.size, arms, [str(u) for u in units])

    def with_arms(self, arms) -> "ExactData":
        d = object.__new__(ExactData)
        d.__dict__.update(self.__dict__)
        d.arms = np.asarray(arms, dtype=bool)
        return d

    def arm_mask(self, arm: str) -> np.ndarray:
        return self.arms if arm == "treatment" else ~self.arms

    def quantile_ci(
        self, query: QuantileQuery, units: Optional[np.ndarray] = None, strict: bool = True
    ) -> QuantileEstimate:
        """Quantile CI over the units selected by boolean mask ``units``."""
        if units is None:
            vals, owners = self.sorted_values, self.sorted_units
            sizes = self.sizes
        else:
            keep = units[self.sorted_units]
            vals, owners = self.sorted_values[keep], self.sorted_units[keep]
            sizes = self.sizes[units]
        if sizes.size < 2:
            raise EstimationError("need at least two units")
        n = vals.size
        b = rank_bounds(n, query, strict=strict)
        q = vals[int(b.r_mid) - 1]
        x_l, x_u = vals[int(b.L) - 1], vals[int(b.U) - 1]
        pos = int(np.searchsorted(vals, q, side="right"))
        s = np.bincount(owners[:pos], minlength=self.n_units).astype(float)
        if units is not None:
            s = s[units]
        flags = ("clamped_rank_bounds",) if b.clamped else ()
        return _finish(q, x_l, x_u, s, sizes, b, query, flags)


def exact_quantile_ci(
    observations: Union[ExactData, Sequence[Sequence[float]]],
    query: QuantileQuery,
    strict: bool = True,
) -> QuantileEstimate:
    """Quantile CI on observation-level data given as one sequence per unit."""
    if not isinstance(observations, ExactData):
        observations = ExactData.from_groups(observations)
    return observations.quantile_ci(query, strict=strict)


def _table_quantile_ci(
    table: HistogramTable,
    query: QuantileQuery,
    units: Optional[np.ndarray] = None,
    strict: bool = True,
    pooled: Optional[np.ndarray] = None,
) -> QuantileEstimate:
    m = table.counts
    if units is None:
        units = np.ones(table.n_units, dtype=bool)
    k = int(units.sum())
    if k < 2:
        raise EstimationError("need at least two units")
    sub = m[units]
    if pooled is None:
        pooled = np.asarray(sub.sum(axis=0)).ravel()
    n = float(pooled.sum())
    b = rank_bounds(n, query, strict=strict)
    spec = table.spec
    loc_mid = locate_rank(pooled, spec, b.r_mid)
    loc_l = locate_rank(pooled, spec, b.L)
    loc_u = locate_rank(pooled, spec, b.U)
    q = value_at_rank(loc_mid)
    x_l, x_u = value_at_rank(loc_l), value_at_rank(loc_u)
    w = below_weights(spec, q)
    s = np.asarray(sub @ w).ravel()
    sizes = np.asarray(sub.sum(axis=1)).ravel()
    flags = []
    if b.clamped:
        flags.append("clamped_rank_bounds")
    if loc_l.bin_index == loc_u.bin_index:
        flags.append("low_resolution")
    return _finish(q, x_l, x_u, s, sizes, b, query, flags)


def histogram_quantile_ci(
    histograms: Union[HistogramTable, Iterable[UnitHistogram]],
    spec: BinSpec,
    query: QuantileQuery,
    strict: bool = True,
) -> QuantileEstimate:
    """Quantile CI from per-unit histograms via within-bin linear interpolation.

    Sets the ``low_resolution`` flag when the whole outer rank interval falls
    in one bin.
    """
    table = as_table(histograms, spec)
    return _table_quantile_ci(table, query, strict=strict)


def _p_value(tau: float, se: float) -> float:
    if se > 0:
        return float(2 * ndtr(-abs(tau / se)))
    return 1.0 if tau == 0 else 0.0


def _effect(tau: float, se: float, z: float, kind: str) -> EffectEstimate:
    return EffectEstimate(
        tau=float(tau),
        se=float(se),
        ci_lo=float(tau - z * se),
        ci_hi=float(tau + z * se),
        p_value=_p_value(tau, se),
        kind=kind,
    )


def qte_absolute(
    est_t: QuantileEstimate, est_c: QuantileEstimate, query: QuantileQuery
) -> EffectEstimate:
    tau = est_t.q - est_c.q
    se = math.sqrt(est_t.se**2 + est_c.se**2)
    return _effect(tau, se, query.z, "absolute")


def qte_relative(
    est_t: QuantileEstimate, est_c: QuantileEstimate, query: QuantileQuery
) -> EffectEstimate:
    q1, q0 = est_t.q, est_c.q
    if q0 == 0:
        raise EstimationError("relative lift is undefined when the control quantile is 0")
    var = (est_t.se**2 + (q1 * q1) / (q0 * q0) * est_c.se**2) / (q0 * q0)
    return _effect(q1 / q0 - 1, math.sqrt(var), query.z, "relative")


def qte(est_t, est_c, query, kind: str = "absolute") -> EffectEstimate:
    if kind == "absolute":
        return qte_absolute(est_t, est_c, query)
    if kind == "relative":
        return qte_relative(est_t, est_c, query)
    raise ValueError(f"unknown effect kind {kind!r}")


@dataclass
class EffectReport:
    p: float
    arm_t: QuantileEstimate
    arm_c: QuantileEstimate
    effect: EffectEstimate
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        def arm(e: QuantileEstimate) -> dict:
            b = e.bounds
            return {"q": e.q, "se": e.se, "c": e.c, "L": b.L, "U": b.U, "n": b.n}

        eff = self.effect
        return {
            "p": self.p,
            "arm_t": arm(self.arm_t),
            "arm_c": arm(self.arm_c),
            "effect": {
                "kind": eff.kind,
                "tau": eff.tau,
                "se": eff.se,
                "ci_lo": eff.ci_lo,
                "ci_hi": eff.ci_hi,
                "p_value": eff.p_value,
            },
            "flags": list(self.flags),
        }


def estimate_effect(
    data: Union[ExactData, HistogramTable],
    query: QuantileQuery,
    kind: str = "absolute",
    strict: bool = True,
) -> EffectReport:
    """Estimate the QTE between the treatment and control arms of ``data``."""
    if data.arms is None:
        raise EstimationError("data carries no arm assignment")
    ests = []
    for arm in ("treatment", "control"):
        mask = data.arm_mask(arm)
        if isinstance(data, HistogramTable):
            ests.append(_table_quantile_ci(data, query, mask, strict=strict))
        else:
            ests.append(data.quantile_ci(query, mask, strict=strict))
    est_t, est_c = ests
    flags = sorted(
        {f"treatment:{f}" for f in est_t.flags} | {f"control:{f}" for f in est_c.flags}
    )
    return EffectReport(query.p, est_t, est_c, qte(est_t, est_c, query, kind), flags)


__all__ = [
    "ClusterStats",
    "EffectEstimate",
    "EffectReport",
    "EstimationError",
    "ExactData",
    "InsufficientSampleError",
    "QuantileEstimate",
    "QuantileQuery",
    "RankBounds",
    "cluster_stats",
    "clustered_mean_variance",
    "estimate_effect",
    "exact_quantile_ci",
    "histogram_quantile_ci",
    "qte",
    "qte_absolute",
    "qte_relative",
    "rank_bounds",
]
